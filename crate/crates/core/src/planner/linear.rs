use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{feature_schema_hash, N_ACTIONS, N_FEATURES};
use crate::executor::{Decision, ExecError, Policy};
use crate::io::{self, IoError};
use crate::rng;
use crate::toolkit::ToolName;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActMode {
    Greedy,
    /// Boltzmann sample from the masked distribution with the given seed.
    Sample(u64),
}

/// Masked linear-softmax routing policy.
///
/// `logits = W x + b` over all actions; infeasible actions receive exactly
/// zero probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub weights: [[f64; N_FEATURES]; N_ACTIONS],
    pub bias: [f64; N_ACTIONS],
}

/// On-disk form of a [`LinearPolicy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub feature_schema_hash: String,
    pub weights: [[f64; N_FEATURES]; N_ACTIONS],
    pub bias: [f64; N_ACTIONS],
}

impl Default for LinearPolicy {
    fn default() -> Self {
        LinearPolicy::zeros()
    }
}

impl LinearPolicy {
    pub fn zeros() -> LinearPolicy {
        LinearPolicy {
            weights: [[0.0; N_FEATURES]; N_ACTIONS],
            bias: [0.0; N_ACTIONS],
        }
    }

    /// Parameters drawn from N(0, scale²).
    pub fn random(seed: u64, scale: f64) -> LinearPolicy {
        let mut p = LinearPolicy::zeros();
        p.add_noise(scale, &mut rng::stream(seed, "policy/init"), true);
        p
    }

    /// A copy with N(0, sigma²) noise added to every weight (bias untouched).
    pub fn perturbed(&self, sigma: f64, seed: u64) -> LinearPolicy {
        let mut p = self.clone();
        p.add_noise(sigma, &mut rng::stream(seed, "policy/perturb"), false);
        p
    }

    fn add_noise(&mut self, sigma: f64, r: &mut rng::Rng, bias_too: bool) {
        if sigma <= 0.0 {
            return;
        }
        let n = Normal::new(0.0, sigma).expect("positive sigma");
        for row in self.weights.iter_mut() {
            for w in row.iter_mut() {
                *w += n.sample(r);
            }
        }
        if bias_too {
            for b in self.bias.iter_mut() {
                *b += n.sample(r);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    pub fn logits(&self, x: &[f64]) -> [f64; N_ACTIONS] {
        let mut z = self.bias;
        for (a, row) in self.weights.iter().enumerate() {
            z[a] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        z
    }

    /// Masked softmax over `feasible`.
    pub fn probs(&self, x: &[f64], feasible: &[ToolName]) -> Result<[f64; N_ACTIONS], ExecError> {
        masked_softmax(&self.logits(x), feasible)
    }

    pub fn log_prob(&self, x: &[f64], feasible: &[ToolName], action: ToolName) -> Result<f64, ExecError> {
        if !feasible.contains(&action) {
            return Err(ExecError::Infeasible { action, step: 0 });
        }
        let z = self.logits(x);
        Ok(z[action.index()] - log_sum_exp(&z, feasible)?)
    }

    pub fn act(&self, x: &[f64], feasible: &[ToolName], mode: ActMode) -> Result<ToolName, ExecError> {
        match mode {
            ActMode::Greedy => greedy(&self.logits(x), feasible),
            ActMode::Sample(seed) => sample(&self.probs(x, feasible)?, feasible, &mut rng::stream(seed, "act/sample")),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            feature_schema_hash: feature_schema_hash(),
            weights: self.weights,
            bias: self.bias,
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<LinearPolicy, IoError> {
        if c.version != CHECKPOINT_VERSION || c.feature_schema_hash != feature_schema_hash() {
            return Err(IoError::Invalid(format!(
                "checkpoint version {} / schema {} does not match this build",
                c.version, c.feature_schema_hash
            )));
        }
        let p = LinearPolicy {
            weights: c.weights,
            bias: c.bias,
        };
        if !p.is_finite() {
            return Err(IoError::Invalid("checkpoint has non-finite parameters".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        io::write_json(path, &self.checkpoint())
    }

    pub fn load(path: &Path) -> Result<LinearPolicy, IoError> {
        LinearPolicy::from_checkpoint(io::read_json(path)?)
    }
}

fn check_feasible(feasible: &[ToolName]) -> Result<(), ExecError> {
    if feasible.is_empty() {
        return Err(ExecError::Policy("empty feasible set".into()));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(z: &[f64; N_ACTIONS], feasible: &[ToolName]) -> Result<f64, ExecError> {
    check_feasible(feasible)?;
    let m = feasible.iter().map(|t| z[t.index()]).fold(f64::NEG_INFINITY, f64::max);
    Ok(m + feasible.iter().map(|t| (z[t.index()] - m).exp()).sum::<f64>().ln())
}

pub(crate) fn masked_softmax(z: &[f64; N_ACTIONS], feasible: &[ToolName]) -> Result<[f64; N_ACTIONS], ExecError> {
    let lse = log_sum_exp(z, feasible)?;
    let mut p = [0.0; N_ACTIONS];
    for t in feasible {
        p[t.index()] = (z[t.index()] - lse).exp();
    }
    Ok(p)
}

/// Argmax; exact ties go to the lexicographically smallest tool name.
fn greedy(z: &[f64; N_ACTIONS], feasible: &[ToolName]) -> Result<ToolName, ExecError> {
    check_feasible(feasible)?;
    let mut best = feasible[0];
    for &t in &feasible[1..] {
        let (a, b) = (z[t.index()], z[best.index()]);
        if a > b || (a == b && t.as_str() < best.as_str()) {
            best = t;
        }
    }
    Ok(best)
}

fn sample(p: &[f64; N_ACTIONS], feasible: &[ToolName], r: &mut rng::Rng) -> Result<ToolName, ExecError> {
    check_feasible(feasible)?;
    let u: f64 = r.random();
    let mut acc = 0.0;
    for &t in feasible {
        acc += p[t.index()];
        if u < acc {
            return Ok(t);
        }
    }
    Ok(*feasible.last().unwrap())
}

impl Policy for LinearPolicy {
    fn name(&self) -> String {
        "linear-greedy".into()
    }

    fn act(&self, d: &Decision<'_>) -> Result<ToolName, ExecError> {
        greedy(&self.logits(d.features), d.feasible)
    }
}

/// Samples from a [`LinearPolicy`] at a temperature, using the decision's
/// seeded stream.
#[derive(Debug, Clone)]
pub struct SampledPolicy {
    pub policy: LinearPolicy,
    pub temperature: f64,
}

impl Policy for SampledPolicy {
    fn name(&self) -> String {
        format!("linear-sample-t{}", self.temperature)
    }

    fn act(&self, d: &Decision<'_>) -> Result<ToolName, ExecError> {
        if !(self.temperature > 0.0) {
            return Err(ExecError::Policy(format!("temperature must be > 0, got {}", self.temperature)));
        }
        let mut z = self.policy.logits(d.features);
        z.iter_mut().for_each(|v| *v /= self.temperature);
        sample(&masked_softmax(&z, d.feasible)?, d.feasible, &mut d.rng("sample"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn x_of(v: &[f64]) -> super::super::FeatureVector {
        let mut x = [0.0; N_FEATURES];
        x.iter_mut().zip(v).for_each(|(a, b)| *a = *b);
        x
    }

    #[test]
    fn zero_weights_are_uniform() {
        let p = LinearPolicy::zeros();
        let feasible = [ToolName::ItemProfile, ToolName::GeoContext, ToolName::CandidateRank];
        let pr = p.probs(&x_of(&[1.0, 0.5]), &feasible).unwrap();
        for t in feasible {
            assert!((pr[t.index()] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(pr[ToolName::LongTermPreference.index()], 0.0);
        // Tie-break: "CandidateRank" < "GeoContext" < "ItemProfile".
        assert_eq!(p.act(&x_of(&[]), &feasible, ActMode::Greedy).unwrap(), ToolName::CandidateRank);
    }

    #[test]
    fn single_feasible_action_is_certain() {
        let p = LinearPolicy::random(3, 1.0);
        let pr = p.probs(&x_of(&[0.3]), &[ToolName::CandidateRank]).unwrap();
        assert_eq!(pr[ToolName::CandidateRank.index()], 1.0);
        assert!(p.act(&x_of(&[]), &[], ActMode::Greedy).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let p = LinearPolicy::random(9, 0.7);
        p.save(&path).unwrap();
        assert_eq!(LinearPolicy::load(&path).unwrap(), p);
        let mut c = p.checkpoint();
        c.feature_schema_hash = "other".into();
        assert!(LinearPolicy::from_checkpoint(c).is_err());
    }

    proptest! {
        #[test]
        fn mask_and_shift_invariance(seed in 0u64..1000, mask in 1u16..512, shift in -50.0f64..50.0) {
            let p = LinearPolicy::random(seed, 2.0);
            let x = x_of(&[0.2, 1.0, 0.0, 0.7]);
            let feasible: Vec<ToolName> = ToolName::ALL.iter().enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1).map(|(_, t)| *t).collect();
            let pr = p.probs(&x, &feasible).unwrap();
            let total: f64 = feasible.iter().map(|t| pr[t.index()]).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for t in ToolName::ALL {
                if !feasible.contains(&t) {
                    prop_assert_eq!(pr[t.index()], 0.0);
                }
            }
            let mut q = p.clone();
            q.bias.iter_mut().for_each(|b| *b += shift);
            let qr = q.probs(&x, &feasible).unwrap();
            for t in &feasible {
                prop_assert!((pr[t.index()] - qr[t.index()]).abs() < 1e-9);
            }
            prop_assert_eq!(p.act(&x, &feasible, ActMode::Greedy).unwrap(), q.act(&x, &feasible, ActMode::Greedy).unwrap());
        }
    }
}
