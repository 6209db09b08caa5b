//! Routing policies: which tool to call next.
//!
//! Baselines ([`ScriptedPolicy`], [`RandomPolicy`], [`GreedyHeuristicPolicy`]),
//! a provider-backed router, and a trainable masked linear-softmax policy with
//! behavior cloning and trajectory-level preference optimization.

mod baseline;
mod linear;
mod oracle;
mod train;

pub use baseline::{GreedyHeuristicPolicy, ProviderPlanner, RandomPolicy, ScriptedPolicy};
pub use linear::{ActMode, Checkpoint, LinearPolicy, SampledPolicy, CHECKPOINT_VERSION};
pub use oracle::{
    best_per_episode, brute_force_optimal_plan, build_preference_pairs, count_plans, emit_dpo_records, emit_sft_records,
    oracle_trajectories, oracle_trajectory, plan_match_rate, sample_rollouts, score_trajectory, step_samples, DpoRecord, OraclePlan, PreferencePair, SftRecord, MAX_ENUMERATED_PLANS,
};
pub use train::{
    dpo_gradient, dpo_loss, dpo_train, preference_satisfaction, sft_gradient, sft_loss, sft_train, DpoConfig, DpoReport,
    Gradient, SftConfig, SftReport, StepSample, TrainConfig, TrainError,
};

use sha2::{Digest, Sha256};

use crate::corpus::Domain;
use crate::executor::{AgentState, ExecConfig};
use crate::toolkit::ToolName;

pub const N_FEATURES: usize = 17;
pub const N_ACTIONS: usize = ToolName::COUNT;

pub type FeatureVector = [f64; N_FEATURES];

/// Names of the feature slots, in order.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = ToolName::ALL.iter().map(|t| format!("called:{t}")).collect();
    names.extend(
        ["step_frac", "log_history", "mean_confidence", "user_side", "item_side", "domain:amazon", "domain:goodreads", "domain:yelp"]
            .map(String::from),
    );
    names
}

/// Hash of the feature layout, stored in checkpoints.
pub fn feature_schema_hash() -> String {
    let digest = Sha256::digest(feature_names().join(",").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Encodes the agent-visible state. Deterministic and bounded: bitmask
/// entries are 0/1, everything else lies in `[0, 1]`.
pub fn featurize(state: &AgentState, config: &ExecConfig) -> FeatureVector {
    let mut x = [0.0; N_FEATURES];
    let called = state.called();
    for t in &called {
        x[t.index()] = 1.0;
    }
    let n = ToolName::COUNT;
    x[n] = (state.step as f64 / config.t_max.max(1) as f64).min(1.0);
    x[n + 1] = ((state.user_view.history_len as f64).ln_1p() / 1000f64.ln_1p()).min(1.0);
    if !state.memory.is_empty() {
        x[n + 2] = state.memory.iter().map(|m| m.output.confidence).sum::<f64>() / state.memory.len() as f64;
    }
    x[n + 3] = (called.iter().filter(|t| t.is_user_side()).count() as f64 / 5.0).min(1.0);
    x[n + 4] = (called.iter().filter(|t| t.is_item_side()).count() as f64 / 3.0).min(1.0);
    match state.user_view.domain {
        Domain::Amazon => x[n + 5] = 1.0,
        Domain::Goodreads => x[n + 6] = 1.0,
        Domain::Yelp => x[n + 7] = 1.0,
        Domain::Synthetic | Domain::SyntheticGeo => {}
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{MemoryEntry, UserView};
    use crate::toolkit::ToolOutput;

    fn state(called: &[ToolName], hist: usize) -> AgentState {
        AgentState {
            episode_id: "u:classic:0".into(),
            user_view: UserView {
                user_id: "u".into(),
                domain: Domain::Yelp,
                profile_text: String::new(),
                history_len: hist,
            },
            candidate_ids: Vec::new(),
            memory: called
                .iter()
                .enumerate()
                .map(|(i, &t)| MemoryEntry {
                    step_index: i,
                    action: t,
                    output: ToolOutput::new(t, Vec::new(), 0.5, String::new()),
                })
                .collect(),
            step: called.len(),
        }
    }

    #[test]
    fn fresh_and_two_step_states() {
        let cfg = ExecConfig::default();
        let x = featurize(&state(&[], 0), &cfg);
        assert_eq!(x.len(), 17);
        assert!(x[..9].iter().all(|&b| b == 0.0));
        assert_eq!(x[9], 0.0);
        let y = featurize(&state(&[ToolName::ItemProfile, ToolName::GeoContext], 1000), &cfg);
        assert_eq!(y[..9].iter().filter(|&&b| b == 1.0).count(), 2);
        assert!((y[9] - 0.2).abs() < 1e-12);
        assert!((y[10] - 1.0).abs() < 1e-12);
        assert!((y[13] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(y[16], 1.0);
    }

    #[test]
    fn schema_hash_is_stable() {
        assert_eq!(feature_names().len(), N_FEATURES);
        assert_eq!(feature_schema_hash(), feature_schema_hash());
        assert_eq!(feature_schema_hash().len(), 64);
    }

    proptest::proptest! {
        #[test]
        fn features_are_bounded(mask in 0u16..256, hist in 0usize..5000, t_max in 2usize..20) {
            let called: Vec<ToolName> = ToolName::ALL[..8].iter().enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1).map(|(_, t)| *t).collect();
            let cfg = ExecConfig { t_max, ..ExecConfig::default() };
            let x = featurize(&state(&called, hist), &cfg);
            for v in x {
                proptest::prop_assert!(v.is_finite() && (0.0..=1.0).contains(&v));
            }
        }
    }
}
