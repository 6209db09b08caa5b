//! Behavior cloning and trajectory-level DPO for [`LinearPolicy`], with
//! analytic gradients.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::linear::masked_softmax;
use super::{LinearPolicy, PreferencePair, N_ACTIONS, N_FEATURES};
use crate::executor::ExecError;
use crate::rng;
use crate::toolkit::ToolName;

/// One routing decision: features, feasible set and the action taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSample {
    pub features: Vec<f64>,
    pub feasible: Vec<ToolName>,
    pub action: ToolName,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("sample {index}: expert action {action} is not in its feasible set")]
    InfeasibleExpert { index: usize, action: ToolName },
    #[error("sample {index}: expected {N_FEATURES} features, got {got}")]
    FeatureWidth { index: usize, got: usize },
    #[error("empty training set")]
    Empty,
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 3,
            lr: 0.1,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta: f64,
    pub batch_size: usize,
    /// Updates over which the learning rate ramps linearly up to `lr`.
    pub warmup: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            epochs: 1,
            lr: 0.05,
            beta: 0.1,
            batch_size: 8,
            warmup: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sft: SftConfig,
    pub dpo: DpoConfig,
    pub lambda: f64,
    pub seed: u64,
    /// Sampled trajectories per episode when building preference pairs.
    pub samples_per_episode: usize,
    pub sample_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sft: SftConfig::default(),
            dpo: DpoConfig::default(),
            lambda: 0.01,
            seed: 0,
            samples_per_episode: 4,
            sample_temperature: 0.5,
        }
    }
}

/// Gradient in the shape of the policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: [[f64; N_FEATURES]; N_ACTIONS],
    pub bias: [f64; N_ACTIONS],
}

impl Gradient {
    pub fn zeros() -> Gradient {
        Gradient {
            weights: [[0.0; N_FEATURES]; N_ACTIONS],
            bias: [0.0; N_ACTIONS],
        }
    }

    /// Parameters in row-major order, weights then bias (same as [`LinearPolicy::to_vec`]).
    pub fn to_vec(&self) -> Vec<f64> {
        self.weights.iter().flatten().chain(self.bias.iter()).copied().collect()
    }

    fn axpy(&mut self, c: f64, other: &Gradient) {
        for (r, o) in self.weights.iter_mut().zip(&other.weights) {
            r.iter_mut().zip(o).for_each(|(a, b)| *a += c * b);
        }
        self.bias.iter_mut().zip(&other.bias).for_each(|(a, b)| *a += c * b);
    }

    /// Adds `c * ∇ log π(action | x, feasible)`.
    fn add_log_prob_grad(&mut self, c: f64, p: &[f64; N_ACTIONS], x: &[f64], action: ToolName) {
        for a in 0..N_ACTIONS {
            let g = f64::from(u8::from(a == action.index())) - p[a];
            if g == 0.0 {
                continue;
            }
            self.bias[a] += c * g;
            self.weights[a].iter_mut().zip(x).for_each(|(w, v)| *w += c * g * v);
        }
    }
}

impl LinearPolicy {
    pub fn to_vec(&self) -> Vec<f64> {
        self.weights.iter().flatten().chain(self.bias.iter()).copied().collect()
    }

    pub fn from_vec(v: &[f64]) -> Option<LinearPolicy> {
        if v.len() != N_ACTIONS * (N_FEATURES + 1) {
            return None;
        }
        let mut p = LinearPolicy::zeros();
        for (a, row) in p.weights.iter_mut().enumerate() {
            row.copy_from_slice(&v[a * N_FEATURES..(a + 1) * N_FEATURES]);
        }
        p.bias.copy_from_slice(&v[N_ACTIONS * N_FEATURES..]);
        Some(p)
    }

    fn step_by(&mut self, lr: f64, g: &Gradient) {
        for (r, o) in self.weights.iter_mut().zip(&g.weights) {
            r.iter_mut().zip(o).for_each(|(a, b)| *a -= lr * b);
        }
        self.bias.iter_mut().zip(&g.bias).for_each(|(a, b)| *a -= lr * b);
    }
}

fn check_samples(samples: &[StepSample]) -> Result<(), TrainError> {
    for (index, s) in samples.iter().enumerate() {
        if s.features.len() != N_FEATURES {
            return Err(TrainError::FeatureWidth {
                index,
                got: s.features.len(),
            });
        }
        if !s.feasible.contains(&s.action) {
            return Err(TrainError::InfeasibleExpert { index, action: s.action });
        }
    }
    Ok(())
}

/// Mean masked cross-entropy `−log p(a | x, mask)`.
pub fn sft_loss(policy: &LinearPolicy, samples: &[StepSample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut total = 0.0;
    for s in samples {
        total -= policy.log_prob(&s.features, &s.feasible, s.action)?;
    }
    Ok(total / samples.len() as f64)
}

pub fn sft_gradient(policy: &LinearPolicy, samples: &[StepSample]) -> Result<Gradient, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut g = Gradient::zeros();
    let c = -1.0 / samples.len() as f64;
    for s in samples {
        let p = masked_softmax(&policy.logits(&s.features), &s.feasible)?;
        g.add_log_prob_grad(c, &p, &s.features, s.action);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub initial_loss: f64,
    /// Full-dataset loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch gradient descent on the masked cross-entropy. Batch order is
/// shuffled per epoch from `seed`.
pub fn sft_train(
    policy: &LinearPolicy,
    samples: &[StepSample],
    config: &SftConfig,
    seed: u64,
) -> Result<(LinearPolicy, SftReport), TrainError> {
    if !(config.lr > 0.0) || config.batch_size == 0 {
        return Err(TrainError::InvalidConfig(format!("lr {} / batch {}", config.lr, config.batch_size)));
    }
    check_samples(samples)?;
    let mut p = policy.clone();
    let initial_loss = sft_loss(&p, samples)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(seed, &format!("sft/epoch/{epoch}")));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<StepSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            p.step_by(config.lr, &sft_gradient(&p, &batch)?);
        }
        epoch_losses.push(sft_loss(&p, samples)?);
        log::debug!("sft epoch {epoch}: loss {:.6}", epoch_losses[epoch]);
    }
    Ok((p, SftReport { initial_loss, epoch_losses }))
}

fn traj_log_prob(policy: &LinearPolicy, steps: &[StepSample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in steps {
        total += policy.log_prob(&s.features, &s.feasible, s.action)?;
    }
    Ok(total)
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(u)`, computed stably.
fn neg_log_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        (-u).exp().ln_1p()
    } else {
        -u + u.exp().ln_1p()
    }
}

fn margin(policy: &LinearPolicy, reference: &LinearPolicy, pair: &PreferencePair, beta: f64) -> Result<f64, TrainError> {
    let w = traj_log_prob(policy, &pair.winner_steps)? - traj_log_prob(reference, &pair.winner_steps)?;
    let l = traj_log_prob(policy, &pair.loser_steps)? - traj_log_prob(reference, &pair.loser_steps)?;
    Ok(beta * (w - l))
}

fn check_beta(beta: f64) -> Result<(), TrainError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(TrainError::InvalidConfig(format!("beta must be > 0, got {beta}")));
    }
    Ok(())
}

/// Mean DPO loss `−log σ(β[(log π(τw) − log πref(τw)) − (log π(τl) − log πref(τl))])`.
pub fn dpo_loss(policy: &LinearPolicy, reference: &LinearPolicy, pairs: &[PreferencePair], beta: f64) -> Result<f64, TrainError> {
    check_beta(beta)?;
    if pairs.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut total = 0.0;
    for pair in pairs {
        total += neg_log_sigmoid(margin(policy, reference, pair, beta)?);
    }
    Ok(total / pairs.len() as f64)
}

pub fn dpo_gradient(
    policy: &LinearPolicy,
    reference: &LinearPolicy,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<Gradient, TrainError> {
    check_beta(beta)?;
    if pairs.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut g = Gradient::zeros();
    for pair in pairs {
        let u = margin(policy, reference, pair, beta)?;
        // d/du of −log σ(u) is −(1 − σ(u)).
        let c = -(1.0 - sigmoid(u)) * beta / pairs.len() as f64;
        let mut d = Gradient::zeros();
        for (steps, sign) in [(&pair.winner_steps, 1.0), (&pair.loser_steps, -1.0)] {
            for s in steps {
                let p = masked_softmax(&policy.logits(&s.features), &s.feasible)?;
                d.add_log_prob_grad(sign, &p, &s.features, s.action);
            }
        }
        g.axpy(c, &d);
    }
    Ok(g)
}

/// Fraction of pairs whose implicit reward margin is positive: the policy
/// has moved the winner's log-ratio against `reference` above the loser's.
/// Zero when `policy == reference`.
pub fn preference_satisfaction(
    policy: &LinearPolicy,
    reference: &LinearPolicy,
    pairs: &[PreferencePair],
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut hits = 0usize;
    for pair in pairs {
        if margin(policy, reference, pair, 1.0)? > 0.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub satisfaction_before: f64,
    pub satisfaction_after: f64,
}

/// Gradient descent on the DPO loss against a frozen `reference`.
pub fn dpo_train(
    policy: &LinearPolicy,
    reference: &LinearPolicy,
    pairs: &[PreferencePair],
    config: &DpoConfig,
    seed: u64,
) -> Result<(LinearPolicy, DpoReport), TrainError> {
    check_beta(config.beta)?;
    if !(config.lr > 0.0) || config.batch_size == 0 {
        return Err(TrainError::InvalidConfig(format!("lr {} / batch {}", config.lr, config.batch_size)));
    }
    for pair in pairs {
        check_samples(&pair.winner_steps)?;
        check_samples(&pair.loser_steps)?;
    }
    let mut p = policy.clone();
    let initial_loss = dpo_loss(&p, reference, pairs, config.beta)?;
    let satisfaction_before = preference_satisfaction(&p, reference, pairs)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut updates = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(seed, &format!("dpo/epoch/{epoch}")));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PreferencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            updates += 1;
            let lr = if config.warmup > 0 {
                config.lr * (updates as f64 / config.warmup as f64).min(1.0)
            } else {
                config.lr
            };
            p.step_by(lr, &dpo_gradient(&p, reference, &batch, config.beta)?);
        }
        epoch_losses.push(dpo_loss(&p, reference, pairs, config.beta)?);
    }
    let satisfaction_after = preference_satisfaction(&p, reference, pairs)?;
    Ok((
        p,
        DpoReport {
            initial_loss,
            epoch_losses,
            satisfaction_before,
            satisfaction_after,
        },
    ))
}
