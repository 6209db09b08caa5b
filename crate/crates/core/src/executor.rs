//! The observe-decide-act loop.
//!
//! At each step the executor computes the feasible tool set, asks the policy
//! for one action, runs the tool through a backend, and appends the result to
//! memory. `CandidateRank` ends the episode. Quality and reward are computed
//! here, against the episode's hidden positive, which the agent never sees.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Domain};
use crate::environment::Episode;
use crate::eval::{score_ranking, EvalError, RankScore};
use crate::io::{self, IoError};
use crate::planner::featurize;
use crate::rng;
use crate::toolkit::{
    execute_tool, BackendKind, CorpusView, EpisodeView, RankOutput, ToolBackend, ToolError, ToolName, ToolOutput,
    ToolRegistry, ToolResult, ToolSpec,
};

/// What the agent knows about the target user before calling any tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserView {
    pub user_id: String,
    pub domain: Domain,
    pub profile_text: String,
    /// Number of interactions visible before the reference time.
    pub history_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub step_index: usize,
    pub action: ToolName,
    pub output: ToolOutput,
}

/// `(u, I_cand, M_t)`. Holds no reference to the held-out positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub episode_id: String,
    pub user_view: UserView,
    pub candidate_ids: Vec<String>,
    pub memory: Vec<MemoryEntry>,
    pub step: usize,
}

impl AgentState {
    pub fn initial(corpus: &Corpus, episode: &EpisodeView) -> Result<AgentState, ToolError> {
        let user = corpus.user(&episode.user_id)?;
        Ok(AgentState {
            episode_id: episode.episode_id.clone(),
            user_view: UserView {
                user_id: user.user_id.clone(),
                domain: episode.domain,
                profile_text: user.profile_text.clone(),
                history_len: CorpusView::visible_history_len(corpus, episode)?,
            },
            candidate_ids: episode.candidate_ids.clone(),
            memory: Vec::new(),
            step: 0,
        })
    }

    pub fn called(&self) -> BTreeSet<ToolName> {
        self.memory.iter().map(|m| m.action).collect()
    }

    /// A copy with one more memory entry; `self` is left untouched.
    pub fn appended(&self, action: ToolName, output: ToolOutput) -> AgentState {
        let mut next = self.clone();
        next.memory.push(MemoryEntry {
            step_index: self.step,
            action,
            output,
        });
        next.step += 1;
        next
    }

    /// Plain-text rendering used in planner prompts and emitted datasets.
    pub fn render(&self) -> String {
        let mut out = format!(
            "user: {} (domain {}, {} past interactions)\n",
            self.user_view.user_id, self.user_view.domain, self.user_view.history_len
        );
        if !self.user_view.profile_text.is_empty() {
            out.push_str(&format!("profile: {}\n", self.user_view.profile_text));
        }
        out.push_str(&format!("candidates: {}\nstep: {}\n", self.candidate_ids.len(), self.step));
        if self.memory.is_empty() {
            out.push_str("memory: empty\n");
        }
        for m in &self.memory {
            out.push_str(&format!(
                "[{}] {} (confidence {}): {}\n",
                m.step_index, m.action, m.output.confidence, m.output.summary
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecConfig {
    /// Step budget, terminal action included.
    pub t_max: usize,
    /// Cost per non-terminal tool step in the reward.
    pub lambda: f64,
    pub allow_repeat: bool,
    pub seed: u64,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            t_max: 10,
            lambda: 0.01,
            allow_repeat: false,
            seed: 0,
        }
    }
}

impl ExecConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        if self.t_max < 2 {
            return Err(ExecError::InvalidConfig(format!("t_max must be >= 2, got {}", self.t_max)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(ExecError::InvalidConfig(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("invalid exec config: {0}")]
    InvalidConfig(String),
    #[error("action {action} is not feasible at step {step}")]
    Infeasible { action: ToolName, step: usize },
    #[error("registry is for {registry} but the episode is {episode}")]
    DomainMismatch { registry: Domain, episode: Domain },
    #[error("policy error: {0}")]
    Policy(String),
    #[error("replay diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },
    #[error("trajectory is incomplete: {0}")]
    Incomplete(String),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Everything a policy may look at when choosing an action.
pub struct Decision<'a> {
    pub state: &'a AgentState,
    pub feasible: &'a [ToolName],
    pub features: &'a [f64],
    pub config: &'a ExecConfig,
}

impl Decision<'_> {
    /// A random stream unique to this (seed, episode, step, tag).
    pub fn rng(&self, tag: &str) -> rng::Rng {
        rng::stream(self.config.seed, &format!("{}/{}/{tag}", self.state.episode_id, self.state.step))
    }
}

/// Maps a decision context to one feasible action.
pub trait Policy: Send + Sync {
    fn name(&self) -> String;

    fn act(&self, decision: &Decision<'_>) -> Result<ToolName, ExecError>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn name(&self) -> String {
        (**self).name()
    }

    fn act(&self, decision: &Decision<'_>) -> Result<ToolName, ExecError> {
        (**self).act(decision)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn act(&self, decision: &Decision<'_>) -> Result<ToolName, ExecError> {
        (**self).act(decision)
    }
}

/// Feasible actions in [`ToolName::ALL`] order.
///
/// Already-called tools are removed unless repeats are allowed, `CandidateRank`
/// is unavailable before any evidence, and at the last budgeted step it is the
/// only option. The result is never empty.
pub fn feasible_actions(state: &AgentState, registry: &ToolRegistry, config: &ExecConfig) -> Vec<ToolName> {
    if state.step + 1 >= config.t_max {
        return vec![ToolName::CandidateRank];
    }
    let called = state.called();
    let mut out: Vec<ToolName> = registry
        .names()
        .filter(|&t| {
            if t.is_terminal() {
                state.step > 0
            } else {
                config.allow_repeat || !called.contains(&t)
            }
        })
        .collect();
    if out.is_empty() {
        // Every evidence tool has been used; ranking is the only move left.
        out.push(ToolName::CandidateRank);
    }
    out
}

pub enum StepOutcome {
    Evidence { next: AgentState, output: ToolOutput },
    Terminal(RankOutput),
}

/// Execute one feasible action. `state` is not modified.
#[allow(clippy::too_many_arguments)]
pub fn step(
    state: &AgentState,
    action: ToolName,
    registry: &ToolRegistry,
    backend: &dyn ToolBackend,
    corpus: &Corpus,
    episode: &EpisodeView,
    config: &ExecConfig,
) -> Result<StepOutcome, ExecError> {
    if !feasible_actions(state, registry, config).contains(&action) {
        return Err(ExecError::Infeasible {
            action,
            step: state.step,
        });
    }
    let spec: &ToolSpec = registry.get(action).ok_or(ExecError::Infeasible {
        action,
        step: state.step,
    })?;
    let view = CorpusView::new(corpus, episode, action, spec.input_needs);
    match execute_tool(spec, state, &view, backend)? {
        ToolResult::Evidence(output) => Ok(StepOutcome::Evidence {
            next: state.appended(action, output.clone()),
            output,
        }),
        ToolResult::Ranking(rank) => Ok(StepOutcome::Terminal(rank)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub features: Vec<f64>,
    pub feasible: Vec<ToolName>,
    pub action: ToolName,
    pub output: ToolResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Completed,
    Failed { step: usize, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: String,
    pub policy: String,
    pub backend: BackendKind,
    pub status: TrajectoryStatus,
    pub steps: Vec<StepRecord>,
    pub final_ranking: Option<RankOutput>,
    pub rank_of_positive: Option<u32>,
    /// Non-terminal actions.
    pub n_tool_steps: usize,
    /// All actions, terminal included.
    pub n_actions: usize,
    pub quality: f64,
    pub reward: f64,
    pub lambda: f64,
    pub t_max: usize,
    /// Seed of the exec config that produced this trajectory.
    pub seed: u64,
    /// Kept out of the serialized log so that reruns are byte-identical.
    #[serde(skip)]
    pub wallclock: f64,
}

impl Trajectory {
    pub fn is_completed(&self) -> bool {
        self.status == TrajectoryStatus::Completed
    }

    pub fn actions(&self) -> Vec<ToolName> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn score(&self) -> Result<RankScore, ExecError> {
        let rank = self
            .rank_of_positive
            .ok_or_else(|| ExecError::Incomplete(format!("{} has no ranking", self.episode_id)))?;
        Ok(RankScore::from_rank(rank)?)
    }
}

/// Runs one episode to completion.
///
/// Tool and policy failures do not abort the caller: the trajectory comes back
/// with `status = Failed` and the steps recorded so far. Contract violations
/// (bad config, registry/domain mismatch, infeasible actions) are errors.
pub fn run_episode(
    episode: &Episode,
    corpus: &Corpus,
    policy: &dyn Policy,
    registry: &ToolRegistry,
    backend: &dyn ToolBackend,
    config: &ExecConfig,
) -> Result<Trajectory, ExecError> {
    config.validate()?;
    if registry.domain != episode.domain {
        return Err(ExecError::DomainMismatch {
            registry: registry.domain,
            episode: episode.domain,
        });
    }
    let started = Instant::now();
    let view = episode.view();
    let mut traj = Trajectory {
        episode_id: episode.episode_id.clone(),
        policy: policy.name(),
        backend: backend.kind(),
        status: TrajectoryStatus::Completed,
        steps: Vec::new(),
        final_ranking: None,
        rank_of_positive: None,
        n_tool_steps: 0,
        n_actions: 0,
        quality: 0.0,
        reward: 0.0,
        lambda: config.lambda,
        t_max: config.t_max,
        seed: config.seed,
        wallclock: 0.0,
    };
    let mut state = AgentState::initial(corpus, &view)?;
    loop {
        let feasible = feasible_actions(&state, registry, config);
        let features = featurize(&state, config).to_vec();
        let decision = Decision {
            state: &state,
            feasible: &feasible,
            features: &features,
            config,
        };
        let action = match policy.act(&decision) {
            Ok(a) => a,
            Err(e) => {
                traj.status = TrajectoryStatus::Failed {
                    step: state.step,
                    error: e.to_string(),
                };
                break;
            }
        };
        if !feasible.contains(&action) {
            return Err(ExecError::Infeasible {
                action,
                step: state.step,
            });
        }
        let outcome = match step(&state, action, registry, backend, corpus, &view, config) {
            Ok(o) => o,
            Err(ExecError::Tool(e)) => {
                log::warn!("episode {} failed at step {}: {e}", episode.episode_id, state.step);
                traj.status = TrajectoryStatus::Failed {
                    step: state.step,
                    error: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        match outcome {
            StepOutcome::Evidence { next, output } => {
                traj.steps.push(StepRecord {
                    step_index: state.step,
                    features,
                    feasible,
                    action,
                    output: ToolResult::Evidence(output),
                });
                state = next;
            }
            StepOutcome::Terminal(rank) => {
                traj.steps.push(StepRecord {
                    step_index: state.step,
                    features,
                    feasible,
                    action,
                    output: ToolResult::Ranking(rank.clone()),
                });
                traj.final_ranking = Some(rank);
                break;
            }
        }
    }
    finish(&mut traj, episode)?;
    traj.wallclock = started.elapsed().as_secs_f64();
    Ok(traj)
}

/// Fill counts, quality and reward from the recorded steps.
fn finish(traj: &mut Trajectory, episode: &Episode) -> Result<(), ExecError> {
    traj.n_actions = traj.steps.len();
    traj.n_tool_steps = traj.steps.iter().filter(|s| !s.action.is_terminal()).count();
    match &traj.final_ranking {
        Some(rank) if traj.is_completed() => {
            let score = score_ranking(rank, &episode.positive_id)?;
            traj.rank_of_positive = Some(score.rank_of_positive);
            traj.quality = score.avg_hr;
            traj.reward = traj.quality - traj.lambda * traj.n_tool_steps as f64;
        }
        _ => {
            traj.rank_of_positive = None;
            traj.quality = 0.0;
            traj.reward = 0.0;
        }
    }
    Ok(())
}

/// Re-execute a logged trajectory.
///
/// Trajectories from deterministic backends (heuristic, synthetic) are re-run
/// through `backend` and every output is compared with the log; the first
/// mismatch is reported as a divergence. Logs from other backends are taken
/// verbatim and only the metrics are recomputed.
pub fn replay(
    logged: &Trajectory,
    episode: &Episode,
    corpus: &Corpus,
    registry: &ToolRegistry,
    backend: &dyn ToolBackend,
) -> Result<Trajectory, ExecError> {
    if !logged.is_completed() {
        return Err(ExecError::Incomplete(format!("{} did not complete", logged.episode_id)));
    }
    let mut traj = logged.clone();
    if !matches!(logged.backend, BackendKind::Heuristic | BackendKind::Synthetic) {
        finish(&mut traj, episode)?;
        return Ok(traj);
    }
    let config = ExecConfig {
        t_max: logged.t_max,
        lambda: logged.lambda,
        allow_repeat: true,
        seed: logged.seed,
    };
    let view = episode.view();
    let mut state = AgentState::initial(corpus, &view)?;
    for (i, rec) in logged.steps.iter().enumerate() {
        let spec = registry.get(rec.action).ok_or_else(|| ExecError::Divergence {
            step: i,
            message: format!("{} is not in the registry", rec.action),
        })?;
        let features = featurize(&state, &config).to_vec();
        let cv = CorpusView::new(corpus, &view, rec.action, spec.input_needs);
        let got = execute_tool(spec, &state, &cv, backend)?;
        if got != rec.output {
            return Err(ExecError::Divergence {
                step: i,
                message: format!("{} output differs from the log", rec.action),
            });
        }
        if features != rec.features {
            return Err(ExecError::Divergence {
                step: i,
                message: "feature snapshot differs from the log".into(),
            });
        }
        match got {
            ToolResult::Evidence(o) => state = state.appended(rec.action, o),
            ToolResult::Ranking(r) => {
                if i + 1 != logged.steps.len() {
                    return Err(ExecError::Divergence {
                        step: i,
                        message: "CandidateRank before the end of the log".into(),
                    });
                }
                traj.final_ranking = Some(r);
            }
        }
    }
    finish(&mut traj, episode)?;
    Ok(traj)
}

/// Run many episodes on a pool of `workers` threads. Output order follows input order.
pub fn run_batch<P: Policy + ?Sized>(
    episodes: &[Episode],
    corpus: &Corpus,
    policy: &P,
    registry: &ToolRegistry,
    backend: &dyn ToolBackend,
    config: &ExecConfig,
    workers: usize,
) -> Result<Vec<Trajectory>, ExecError> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExecError::InvalidConfig(e.to_string()))?;
    let policy: &dyn Policy = &policy;
    pool.install(|| {
        episodes
            .par_iter()
            .map(|ep| run_episode(ep, corpus, policy, registry, backend, config))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Timing {
    episode_id: String,
    seed: u64,
    wallclock_secs: f64,
}

/// Writes `trajectories.jsonl`, plus `runlog/config.json` and `runlog/timings.jsonl`.
pub fn write_run(dir: &Path, trajectories: &[Trajectory], config: &serde_json::Value) -> Result<(), IoError> {
    io::write_jsonl(&dir.join("trajectories.jsonl"), trajectories.iter())?;
    io::write_json(&dir.join("runlog").join("config.json"), config)?;
    let timings: Vec<Timing> = trajectories
        .iter()
        .map(|t| Timing {
            episode_id: t.episode_id.clone(),
            seed: t.seed,
            wallclock_secs: t.wallclock,
        })
        .collect();
    io::write_jsonl(&dir.join("runlog").join("timings.jsonl"), timings.iter())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, IoError> {
    io::read_jsonl(path)
}
