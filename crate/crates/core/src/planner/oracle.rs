//! Trajectory scoring, preference pairs, the brute-force plan oracle and
//! dataset emission.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LinearPolicy, SampledPolicy, ScriptedPolicy, StepSample};
use crate::corpus::Corpus;
use crate::environment::{Episode, SyntheticWorld, SyntheticWorldData};
use crate::executor::{run_batch, run_episode, AgentState, ExecConfig, ExecError, Trajectory};
use crate::rng;
use crate::toolkit::{ToolBackend, ToolName, ToolRegistry, ToolResult};

/// Enumeration refuses plan spaces larger than this.
pub const MAX_ENUMERATED_PLANS: u128 = 1_000_000;

/// `quality − λ · n_tool_steps` of a completed trajectory.
pub fn score_trajectory(traj: &Trajectory, lambda: f64) -> Result<f64, ExecError> {
    if !traj.is_completed() || traj.final_ranking.is_none() {
        return Err(ExecError::Incomplete(format!("{} has no final ranking", traj.episode_id)));
    }
    Ok(traj.quality - lambda * traj.n_tool_steps as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub episode_id: String,
    pub winner: Vec<ToolName>,
    pub loser: Vec<ToolName>,
    pub winner_reward: f64,
    pub loser_reward: f64,
    pub winner_steps: Vec<StepSample>,
    pub loser_steps: Vec<StepSample>,
}

fn samples_of(traj: &Trajectory) -> Vec<StepSample> {
    traj.steps
        .iter()
        .map(|s| StepSample {
            features: s.features.clone(),
            feasible: s.feasible.clone(),
            action: s.action,
        })
        .collect()
}

fn names(actions: &[ToolName]) -> Vec<&'static str> {
    actions.iter().map(|a| a.as_str()).collect()
}

/// For each episode, pairs the best trajectory with every trajectory that is
/// strictly worse, or equally rewarded but longer. Best means highest reward,
/// then fewest actions, then lexicographically smallest action names.
/// Incomplete trajectories are ignored.
pub fn build_preference_pairs(trajectories: &[Trajectory], lambda: f64) -> Vec<PreferencePair> {
    let mut groups: BTreeMap<&str, Vec<(&Trajectory, f64)>> = BTreeMap::new();
    for t in trajectories {
        if let Ok(r) = score_trajectory(t, lambda) {
            groups.entry(t.episode_id.as_str()).or_default().push((t, r));
        }
    }
    let mut pairs = Vec::new();
    for (episode_id, group) in groups {
        let best = best_of(&group);
        for &(t, r) in &group {
            let worse = r < best.1 || (r == best.1 && t.steps.len() > best.0.steps.len());
            if worse {
                pairs.push(PreferencePair {
                    episode_id: episode_id.to_string(),
                    winner: best.0.actions(),
                    loser: t.actions(),
                    winner_reward: best.1,
                    loser_reward: r,
                    winner_steps: samples_of(best.0),
                    loser_steps: samples_of(t),
                });
            }
        }
    }
    pairs
}

fn best_of<'a>(group: &[(&'a Trajectory, f64)]) -> (&'a Trajectory, f64) {
    let better = |a: &(&Trajectory, f64), b: &(&Trajectory, f64)| {
        a.1 > b.1
            || (a.1 == b.1 && a.0.steps.len() < b.0.steps.len())
            || (a.1 == b.1 && a.0.steps.len() == b.0.steps.len() && names(&a.0.actions()) < names(&b.0.actions()))
    };
    let mut best = group[0];
    for &g in &group[1..] {
        if better(&g, &best) {
            best = g;
        }
    }
    best
}

/// The best completed trajectory of each episode (same order as
/// [`build_preference_pairs`]), sorted by episode id.
pub fn best_per_episode(trajectories: &[Trajectory], lambda: f64) -> Vec<&Trajectory> {
    let mut groups: BTreeMap<&str, Vec<(&Trajectory, f64)>> = BTreeMap::new();
    for t in trajectories {
        if let Ok(r) = score_trajectory(t, lambda) {
            groups.entry(t.episode_id.as_str()).or_default().push((t, r));
        }
    }
    groups.values().map(|g| best_of(g).0).collect()
}

/// Number of action sequences ending in `CandidateRank` with at least one
/// and at most `t_max − 1` evidence steps drawn from `n_tools` tools.
pub fn count_plans(n_tools: usize, t_max: usize, allow_repeat: bool) -> u128 {
    let mut total = 0u128;
    let mut term = 1u128;
    for k in 1..t_max {
        let choices = if allow_repeat { n_tools } else { n_tools.saturating_sub(k - 1) } as u128;
        if choices == 0 {
            break;
        }
        term = term.saturating_mul(choices);
        total = total.saturating_add(term);
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePlan {
    /// Evidence tools in order, then `CandidateRank`.
    pub actions: Vec<ToolName>,
    pub quality: f64,
    pub reward: f64,
    pub n_enumerated: u128,
}

/// Exhaustive search over feasible plans in a synthetic world.
///
/// Since `CandidateRank` needs at least one evidence step, every plan has one
/// or more tools before it. Ties go to the shorter plan, then to the
/// lexicographically smaller sequence of tool names.
pub fn brute_force_optimal_plan(world: &SyntheticWorld, registry: &ToolRegistry, config: &ExecConfig) -> Result<OraclePlan, ExecError> {
    config.validate()?;
    let mut tools: Vec<ToolName> = registry.names().filter(|t| !t.is_terminal()).collect();
    tools.sort_by_key(|t| t.as_str());
    let n_plans = count_plans(tools.len(), config.t_max, config.allow_repeat);
    if n_plans > MAX_ENUMERATED_PLANS {
        return Err(ExecError::InvalidConfig(format!(
            "{n_plans} plans exceed the enumeration limit of {MAX_ENUMERATED_PLANS}"
        )));
    }
    if tools.is_empty() {
        return Err(ExecError::InvalidConfig("registry has no evidence tools".into()));
    }
    let mut search = Search {
        world,
        tools: &tools,
        config,
        path: Vec::new(),
        best: None,
        n: 0,
    };
    search.dfs();
    let (mut actions, quality, reward) = search.best.expect("at least one plan");
    actions.push(ToolName::CandidateRank);
    Ok(OraclePlan {
        actions,
        quality,
        reward,
        n_enumerated: search.n,
    })
}

struct Search<'a> {
    world: &'a SyntheticWorld,
    tools: &'a [ToolName],
    config: &'a ExecConfig,
    path: Vec<ToolName>,
    best: Option<(Vec<ToolName>, f64, f64)>,
    n: u128,
}

impl Search<'_> {
    // Preorder over name-sorted tools visits equal-length sequences in
    // lexicographic order, so only strict improvements replace the incumbent.
    fn dfs(&mut self) {
        if !self.path.is_empty() {
            self.n += 1;
            let quality = self.world.quality_for(&self.path);
            let reward = quality - self.config.lambda * self.path.len() as f64;
            let improves = match &self.best {
                None => true,
                Some((p, _, r)) => reward > *r || (reward == *r && self.path.len() < p.len()),
            };
            if improves {
                self.best = Some((self.path.clone(), quality, reward));
            }
        }
        if self.path.len() + 1 >= self.config.t_max {
            return;
        }
        for &t in self.tools {
            if !self.config.allow_repeat && self.path.contains(&t) {
                continue;
            }
            self.path.push(t);
            self.dfs();
            self.path.pop();
        }
    }
}

/// Runs `actions` through the executor to obtain a fully logged trajectory.
pub fn oracle_trajectory(
    episode: &Episode,
    corpus: &Corpus,
    actions: &[ToolName],
    registry: &ToolRegistry,
    backend: &dyn ToolBackend,
    config: &ExecConfig,
) -> Result<Trajectory, ExecError> {
    let policy = ScriptedPolicy::new("oracle", actions.to_vec());
    run_episode(episode, corpus, &policy, registry, backend, config)
}

/// Oracle trajectories for every episode of a synthetic world. The plan is
/// enumerated once per archetype.
pub fn oracle_trajectories(data: &SyntheticWorldData, registry: &ToolRegistry, config: &ExecConfig) -> Result<Vec<Trajectory>, ExecError> {
    let mut plans: BTreeMap<usize, OraclePlan> = BTreeMap::new();
    let mut out = Vec::with_capacity(data.episodes.len());
    for (i, ep) in data.episodes.iter().enumerate() {
        let a = data.archetype_of[i];
        if !plans.contains_key(&a) {
            plans.insert(a, brute_force_optimal_plan(data.world_of(i), registry, config)?);
        }
        let traj = oracle_trajectory(ep, &data.corpus, &plans[&a].actions, registry, &data.backend, config)?;
        if !traj.is_completed() {
            return Err(ExecError::Incomplete(format!("oracle run of {} failed", ep.episode_id)));
        }
        out.push(traj);
    }
    Ok(out)
}

/// Flattens the steps of completed trajectories into supervised samples.
pub fn step_samples<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Vec<StepSample> {
    trajectories.into_iter().filter(|t| t.is_completed()).flat_map(samples_of).collect()
}

/// `k` sampled rollouts per episode at `temperature`; rollout `s` uses a
/// seed derived from `config.seed` and `s`.
#[allow(clippy::too_many_arguments)]
pub fn sample_rollouts(
    policy: &LinearPolicy,
    temperature: f64,
    k: usize,
    episodes: &[Episode],
    corpus: &Corpus,
    registry: &ToolRegistry,
    backend: &dyn ToolBackend,
    config: &ExecConfig,
    workers: usize,
) -> Result<Vec<Trajectory>, ExecError> {
    let sampler = SampledPolicy {
        policy: policy.clone(),
        temperature,
    };
    let mut out = Vec::with_capacity(k * episodes.len());
    for s in 0..k {
        let exec = ExecConfig {
            seed: rng::derive_seed(config.seed, &format!("rollout/{s}")),
            ..config.clone()
        };
        out.extend(run_batch(episodes, corpus, &sampler, registry, backend, &exec, workers)?);
    }
    Ok(out)
}

/// Fraction of `runs` whose action sequence equals the reference
/// trajectory's for the same episode.
pub fn plan_match_rate(runs: &[Trajectory], reference: &[Trajectory]) -> f64 {
    let want: BTreeMap<&str, Vec<ToolName>> = reference.iter().map(|t| (t.episode_id.as_str(), t.actions())).collect();
    if runs.is_empty() {
        return 0.0;
    }
    let hits = runs
        .iter()
        .filter(|t| t.is_completed() && want.get(t.episode_id.as_str()) == Some(&t.actions()))
        .count();
    hits as f64 / runs.len() as f64
}

/// One line of `sft.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub episode_id: String,
    pub step: usize,
    pub state_text: String,
    pub feasible: Vec<ToolName>,
    pub action: ToolName,
}

/// One line of `dpo.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub episode_id: String,
    pub state_context: String,
    pub chosen: Vec<ToolName>,
    pub rejected: Vec<ToolName>,
}

/// Per-step records of a completed trajectory, with the state rebuilt from
/// the logged outputs.
pub fn emit_sft_records(traj: &Trajectory, episode: &Episode, corpus: &Corpus) -> Result<Vec<SftRecord>, ExecError> {
    if !traj.is_completed() {
        return Err(ExecError::Incomplete(traj.episode_id.clone()));
    }
    let mut state = AgentState::initial(corpus, &episode.view())?;
    let mut out = Vec::with_capacity(traj.steps.len());
    for s in &traj.steps {
        out.push(SftRecord {
            episode_id: traj.episode_id.clone(),
            step: s.step_index,
            state_text: state.render(),
            feasible: s.feasible.clone(),
            action: s.action,
        });
        if let ToolResult::Evidence(o) = &s.output {
            state = state.appended(s.action, o.clone());
        }
    }
    Ok(out)
}

pub fn emit_dpo_records(pairs: &[PreferencePair], episodes: &[Episode], corpus: &Corpus) -> Result<Vec<DpoRecord>, ExecError> {
    let by_id: BTreeMap<&str, &Episode> = episodes.iter().map(|e| (e.episode_id.as_str(), e)).collect();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ep = by_id
            .get(p.episode_id.as_str())
            .ok_or_else(|| ExecError::Incomplete(format!("no task for {}", p.episode_id)))?;
        out.push(DpoRecord {
            episode_id: p.episode_id.clone(),
            state_context: AgentState::initial(corpus, &ep.view())?.render(),
            chosen: p.winner.clone(),
            rejected: p.loser.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Domain;
    use crate::executor::TrajectoryStatus;
    use crate::toolkit::{register_tools, RankOutput};

    fn traj(id: &str, quality: f64, n_tools: usize) -> Trajectory {
        let mut steps = Vec::new();
        for (i, t) in ToolName::ALL[..n_tools].iter().enumerate() {
            steps.push(crate::executor::StepRecord {
                step_index: i,
                features: vec![0.0; 17],
                feasible: vec![*t],
                action: *t,
                output: ToolResult::Ranking(RankOutput {
                    ranking: vec![],
                    scores: vec![],
                    explanations: vec![],
                }),
            });
        }
        Trajectory {
            episode_id: id.into(),
            policy: "p".into(),
            backend: crate::toolkit::BackendKind::Synthetic,
            status: TrajectoryStatus::Completed,
            steps,
            final_ranking: Some(RankOutput {
                ranking: vec![],
                scores: vec![],
                explanations: vec![],
            }),
            rank_of_positive: Some(1),
            n_tool_steps: n_tools,
            n_actions: n_tools + 1,
            quality,
            reward: quality - 0.01 * n_tools as f64,
            lambda: 0.01,
            t_max: 10,
            seed: 0,
            wallclock: 0.0,
        }
    }

    #[test]
    fn score_examples() {
        assert!((score_trajectory(&traj("e", 1.0, 4), 0.01).unwrap() - 0.96).abs() < 1e-12);
        assert_eq!(score_trajectory(&traj("e", 0.0, 0), 0.01).unwrap(), 0.0);
        assert_eq!(score_trajectory(&traj("e", 0.7, 3), 0.0).unwrap(), 0.7);
    }

    #[test]
    fn pairs_prefer_reward_then_brevity() {
        let pairs = build_preference_pairs(&[traj("e", 1.0, 4), traj("e", 2.0 / 3.0 + 0.01, 4)], 0.01);
        assert_eq!(pairs.len(), 1);
        assert!((pairs[0].winner_reward - 0.96).abs() < 1e-12);
        let tie = build_preference_pairs(&[traj("e", 1.0, 5), traj("e", 1.0, 3)], 0.0);
        assert_eq!(tie.len(), 1);
        assert_eq!(tie[0].winner.len(), 3);
        assert!(build_preference_pairs(&[traj("e", 1.0, 3)], 0.01).is_empty());
        assert!(build_preference_pairs(&[traj("e", 1.0, 3), traj("e", 1.0, 3)], 0.01).is_empty());
    }

    #[test]
    fn plan_counts() {
        assert_eq!(count_plans(8, 2, false), 8);
        assert_eq!(count_plans(8, 3, false), 8 + 56);
        assert_eq!(count_plans(8, 10, false), 109_600);
        assert!(count_plans(8, 10, true) > MAX_ENUMERATED_PLANS);
    }

    #[test]
    fn brute_force_examples() {
        let reg = register_tools(Domain::Synthetic);
        let cfg = ExecConfig::default();
        let empty = SyntheticWorld::graded(&[], 7, 7).unwrap();
        let plan = brute_force_optimal_plan(&empty, &reg, &cfg).unwrap();
        // Ranking needs one evidence step; the tie goes to the first name.
        assert_eq!(plan.actions, vec![ToolName::AuthorPreference, ToolName::CandidateRank]);
        assert!((plan.reward - (empty.quality_for(&[]) - 0.01)).abs() < 1e-12);

        let stp = SyntheticWorld::graded(&[ToolName::ShortTermPreference], 10, 1).unwrap();
        let plan = brute_force_optimal_plan(&stp, &reg, &cfg).unwrap();
        assert_eq!(plan.actions, vec![ToolName::ShortTermPreference, ToolName::CandidateRank]);
        assert!((plan.reward - 0.99).abs() < 1e-12);
        assert_eq!(plan.n_enumerated, count_plans(7, 10, false));

        let big = ExecConfig {
            allow_repeat: true,
            ..cfg
        };
        assert!(brute_force_optimal_plan(&stp, &reg, &big).is_err());
    }
}
