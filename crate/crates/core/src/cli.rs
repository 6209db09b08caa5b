//! Command-line surface: one subcommand per pipeline stage.
//!
//! Every command reads an optional JSON [`RunConfig`] (`--config`), applies
//! flag overrides on top (flags win) and writes the effective configuration
//! into its output directory. Errors go to stderr as one JSON object and the
//! process exits nonzero.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{load_corpus, Corpus, CorpusError};
use crate::environment::{
    greedy_select_tasks, make_synthetic_world, read_tasks, write_tasks, EnvError, Episode, EpisodeFactory, EpisodeStats,
    ReferenceProfile, Scenario, ScenarioSpec, SelectionWeights, SyntheticSuite, SyntheticWorldData,
};
use crate::eval::{aggregate, render_markdown, EpisodeResult, EvalError, RunReport};
use crate::executor::{read_trajectories, replay, run_batch, write_run, ExecConfig, ExecError, Policy, Trajectory};
use crate::io::{self, IoError};
use crate::mining::{mine, write_mining_output, CoTTrace, HashingEmbedder, MiningConfig, MiningError, OpTable};
use crate::planner::{
    best_per_episode, brute_force_optimal_plan, build_preference_pairs, dpo_train, emit_dpo_records, emit_sft_records,
    oracle_trajectories, plan_match_rate, sample_rollouts, sft_train, step_samples, GreedyHeuristicPolicy, LinearPolicy,
    ProviderPlanner, RandomPolicy, SampledPolicy, ScriptedPolicy, TrainConfig, TrainError,
};
use crate::provider::{ProviderClient, ProviderConfig, ProviderError};
use crate::rng;
use crate::toolkit::{register_tools, BackendKind, HeuristicBackend, ProviderBackend, ToolBackend, ToolName};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("replay failed: {0}")]
    Replay(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Replay(_) => "replay",
            CliError::Corpus(_) => "corpus",
            CliError::Env(_) => "environment",
            CliError::Exec(_) => "executor",
            CliError::Train(_) => "training",
            CliError::Mining(_) => "mining",
            CliError::Eval(_) => "eval",
            CliError::Provider(_) => "provider",
            CliError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    Heuristic,
    Provider,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub scenarios: Vec<Scenario>,
    /// Select this many episodes by distribution matching; all when unset.
    pub select: Option<usize>,
    pub restarts: usize,
    /// Reference profile to match; the full pool's own profile when unset.
    pub reference: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            scenarios: Scenario::ALL.to_vec(),
            select: None,
            restarts: 4,
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub episodes: usize,
    /// Suite definition; three archetypes when unset.
    pub suite: Option<PathBuf>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            episodes: 300,
            suite: None,
        }
    }
}

/// Effective configuration of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub backend: BackendChoice,
    /// The API key is read from `provider.api_key_env`, never from this file.
    pub provider: ProviderConfig,
    /// `greedy[:N]`, `random`, `scripted:A,B,..`, `linear:PATH`, `sample:PATH` or `provider`.
    pub policy: String,
    /// Trajectories per episode; sample `s` runs with a seed derived from `seed` and `s`.
    pub samples: usize,
    pub exec: ExecConfig,
    pub train: TrainConfig,
    pub mining: MiningConfig,
    pub tasks_config: TaskConfig,
    pub synthetic: SyntheticConfig,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            tasks: None,
            trajectories: None,
            output: None,
            backend: BackendChoice::Heuristic,
            provider: ProviderConfig::default(),
            policy: "greedy".into(),
            samples: 1,
            exec: ExecConfig::default(),
            train: TrainConfig::default(),
            mining: MiningConfig::default(),
            tasks_config: TaskConfig::default(),
            synthetic: SyntheticConfig::default(),
            checkpoint: None,
            seed: 0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "agentrec", version, about = "Tool-routing agent for interactive recommendation episodes")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch work (default: logical cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus and print its summary.
    Ingest(IngestArgs),
    /// Generate episodes, optionally distribution-matched.
    MakeTasks(MakeTasksArgs),
    /// Run a policy over episodes and write trajectories and a report.
    Run(RunArgs),
    /// Cluster reasoning traces and map clusters to tools.
    Mine(MineArgs),
    /// Behavior-clone a linear routing policy.
    TrainSft(TrainArgs),
    /// Preference-optimize a linear routing policy against its frozen copy.
    TrainDpo(TrainArgs),
    /// Write sft.jsonl and dpo.jsonl from logged trajectories.
    EmitDatasets(EmitArgs),
    /// Score logged trajectories.
    Eval(EvalArgs),
    /// Re-execute a run directory and verify it against its log.
    Replay(ReplayArgs),
    /// Enumerate optimal plans in a synthetic world.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeTasksArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated scenario names.
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Option<Vec<Scenario>>,
    #[arg(long)]
    pub select: Option<usize>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Alternative op table (JSON).
    #[arg(long)]
    pub op_table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Train on this many episodes of a synthetic world.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Train on logged trajectories instead (needs --tasks and --corpus for SFT emission).
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Starting checkpoint; required for train-dpo.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmitArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Run directory written by `run`.
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report_error("usage", &e.to_string());
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).unwrap_or_default());
            0
        }
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            1
        }
    }
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    run_cli(std::env::args_os())
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", json!({"error": kind, "message": message.trim()}));
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::MissingInput(format!("config {}", path.display())));
            }
            io::read_json(path).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.workers = cfg.workers.max(1);
    Ok(cfg)
}

fn set<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

/// Resolves a required input path and makes it absolute so snapshots stay valid.
fn existing(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    let p = path.as_ref().ok_or_else(|| CliError::MissingInput(format!("--{what} is required")))?;
    std::fs::canonicalize(p).map_err(|_| CliError::MissingInput(format!("{what} {} does not exist", p.display())))
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.output.clone().ok_or_else(|| CliError::MissingInput("--out is required".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| IoError::Fs {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn snapshot(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    Ok(io::write_json(&dir.join("config.json"), cfg)?)
}

fn dispatch(cli: Cli) -> Result<Value, CliError> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest(a) => {
            set(&mut cfg.corpus, a.corpus);
            set(&mut cfg.output, a.out);
            cmd_ingest(&mut cfg)
        }
        Command::MakeTasks(a) => {
            set(&mut cfg.corpus, a.corpus);
            set(&mut cfg.output, a.out);
            if let Some(s) = a.scenarios {
                cfg.tasks_config.scenarios = s;
            }
            set(&mut cfg.tasks_config.select, a.select);
            set(&mut cfg.tasks_config.reference, a.reference);
            cmd_make_tasks(&mut cfg)
        }
        Command::Run(a) => {
            set(&mut cfg.corpus, a.corpus);
            set(&mut cfg.tasks, a.tasks);
            set(&mut cfg.output, a.out);
            if let Some(p) = a.policy {
                cfg.policy = p;
            }
            if let Some(b) = a.backend {
                cfg.backend = b;
            }
            if let Some(s) = a.samples {
                cfg.samples = s;
            }
            if let Some(t) = a.t_max {
                cfg.exec.t_max = t;
            }
            if let Some(l) = a.lambda {
                cfg.exec.lambda = l;
            }
            cmd_run(&mut cfg)
        }
        Command::Mine(a) => {
            set(&mut cfg.output, a.out);
            cmd_mine(&mut cfg, &a.traces, a.op_table.as_deref())
        }
        Command::TrainSft(a) => {
            apply_train_args(&mut cfg, &a, false);
            cmd_train_sft(&mut cfg, a.synthetic)
        }
        Command::TrainDpo(a) => {
            apply_train_args(&mut cfg, &a, true);
            cmd_train_dpo(&mut cfg, a.synthetic)
        }
        Command::EmitDatasets(a) => {
            set(&mut cfg.corpus, a.corpus);
            set(&mut cfg.tasks, a.tasks);
            set(&mut cfg.trajectories, a.trajectories);
            set(&mut cfg.output, a.out);
            cmd_emit(&mut cfg)
        }
        Command::Eval(a) => {
            set(&mut cfg.tasks, a.tasks);
            set(&mut cfg.trajectories, a.trajectories);
            set(&mut cfg.output, a.out);
            cmd_eval(&mut cfg)
        }
        Command::Replay(a) => cmd_replay(&a.run),
        Command::Oracle(a) => {
            set(&mut cfg.output, a.out);
            if let Some(n) = a.synthetic {
                cfg.synthetic.episodes = n;
            }
            cmd_oracle(&mut cfg)
        }
    }
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs, dpo: bool) {
    set(&mut cfg.trajectories, a.trajectories.clone());
    set(&mut cfg.checkpoint, a.checkpoint.clone());
    set(&mut cfg.output, a.out.clone());
    if let Some(n) = a.synthetic {
        cfg.synthetic.episodes = n;
    }
    if let Some(e) = a.epochs {
        if dpo {
            cfg.train.dpo.epochs = e;
        } else {
            cfg.train.sft.epochs = e;
        }
    }
}

fn cmd_ingest(cfg: &mut RunConfig) -> Result<Value, CliError> {
    let path = existing(&cfg.corpus, "corpus")?;
    cfg.corpus = Some(path.clone());
    let corpus = load_corpus(&path)?;
    let summary = json!({
        "domain": corpus.domain(),
        "n_users": corpus.n_users(),
        "n_items": corpus.n_items(),
        "n_interactions": corpus.interactions().len(),
        "n_reviews": corpus.reviews().len(),
    });
    if cfg.output.is_some() {
        let dir = output_dir(cfg)?;
        io::write_json(&dir.join("ingest.json"), &summary)?;
        snapshot(&dir, cfg)?;
    }
    Ok(summary)
}

/// Every (user, scenario) episode the corpus supports, in user then scenario order.
pub fn episode_pool(corpus: &Corpus, scenarios: &[Scenario], seed: u64) -> Result<(Vec<Episode>, usize), EnvError> {
    let factory = EpisodeFactory::new(corpus);
    let mut pool = Vec::new();
    let mut skipped = 0;
    let users: Vec<&str> = corpus.users().map(|u| u.user_id.as_str()).collect();
    for user in users {
        for &s in scenarios {
            match factory.generate(user, &ScenarioSpec::new(s), seed) {
                Ok(ep) => pool.push(ep),
                Err(EnvError::NoEligiblePositive { .. } | EnvError::InsufficientNegatives { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((pool, skipped))
}

fn cmd_make_tasks(cfg: &mut RunConfig) -> Result<Value, CliError> {
    let path = existing(&cfg.corpus, "corpus")?;
    cfg.corpus = Some(path.clone());
    let dir = output_dir(cfg)?;
    let corpus = load_corpus(&path)?;
    let (pool, skipped) = episode_pool(&corpus, &cfg.tasks_config.scenarios, cfg.seed)?;
    let stats: Vec<EpisodeStats> = pool.iter().map(|e| EpisodeStats::from_episode(&corpus, e)).collect::<Result<_, _>>()?;
    let reference = match &cfg.tasks_config.reference {
        Some(p) => ReferenceProfile::load(p)?,
        None => ReferenceProfile::from_stats(&stats)?,
    };
    let (episodes, objective) = match cfg.tasks_config.select {
        Some(n) => {
            let result = greedy_select_tasks(&stats, &reference, n, cfg.tasks_config.restarts, cfg.seed, &SelectionWeights::default())?;
            let by_id: BTreeMap<&str, &Episode> = pool.iter().map(|e| (e.episode_id.as_str(), e)).collect();
            let chosen = result.selected.iter().map(|id| by_id[id.as_str()].clone()).collect();
            io::write_json(&dir.join("selection.json"), &result)?;
            (chosen, Some(result.objective))
        }
        None => (pool.clone(), None),
    };
    let tasks_path = dir.join("tasks.jsonl");
    write_tasks(&tasks_path, &episodes)?;
    reference.save(&dir.join("reference_profile.json"))?;
    snapshot(&dir, cfg)?;
    Ok(json!({
        "tasks": tasks_path,
        "pool": pool.len(),
        "skipped": skipped,
        "episodes": episodes.len(),
        "objective": objective,
    }))
}

fn provider_client(cfg: &RunConfig) -> Result<ProviderClient, CliError> {
    Ok(ProviderClient::http(cfg.provider.clone())?)
}

fn build_policy(cfg: &RunConfig) -> Result<Box<dyn Policy>, CliError> {
    let spec = cfg.policy.trim();
    let (kind, arg) = spec.split_once(':').map_or((spec, None), |(k, a)| (k, Some(a)));
    Ok(match (kind, arg) {
        ("greedy", None) => Box::new(GreedyHeuristicPolicy::default()),
        ("greedy", Some(n)) => Box::new(GreedyHeuristicPolicy {
            max_tools: n.parse().map_err(|_| CliError::Config(format!("bad tool budget in `{spec}`")))?,
            ..GreedyHeuristicPolicy::default()
        }),
        ("random", None) => Box::new(RandomPolicy),
        ("scripted", Some(seq)) => {
            let script = seq
                .split(',')
                .map(|s| s.trim().parse::<ToolName>().map_err(CliError::Config))
                .collect::<Result<Vec<_>, _>>()?;
            Box::new(ScriptedPolicy::new("scripted", script))
        }
        ("linear", Some(p)) => Box::new(LinearPolicy::load(Path::new(p))?),
        ("sample", Some(p)) => Box::new(SampledPolicy {
            policy: LinearPolicy::load(Path::new(p))?,
            temperature: cfg.train.sample_temperature,
        }),
        ("provider", None) => Box::new(ProviderPlanner::new(provider_client(cfg)?)),
        _ => return Err(CliError::Config(format!("unknown policy `{spec}`"))),
    })
}

fn build_backend(cfg: &RunConfig) -> Result<Box<dyn ToolBackend>, CliError> {
    Ok(match cfg.backend {
        BackendChoice::Heuristic => Box::new(HeuristicBackend),
        BackendChoice::Provider => Box::new(ProviderBackend::new(provider_client(cfg)?)),
    })
}

/// Report over completed trajectories; failed ones are counted in the config
/// block and left out of the means.
pub fn report_for(
    trajectories: &[Trajectory],
    episodes: &[Episode],
    run_id: &str,
    config: Value,
) -> Result<RunReport, CliError> {
    let by_id: BTreeMap<&str, &Episode> = episodes.iter().map(|e| (e.episode_id.as_str(), e)).collect();
    let mut results = Vec::new();
    let mut failed = 0usize;
    for t in trajectories {
        let ep = by_id
            .get(t.episode_id.as_str())
            .ok_or_else(|| CliError::MissingInput(format!("no task for trajectory {}", t.episode_id)))?;
        if !t.is_completed() {
            failed += 1;
            continue;
        }
        results.push(EpisodeResult::new(&t.episode_id, ep.scenario, t.score()?, t.n_tool_steps, t.reward));
    }
    let policy = trajectories.first().map_or("unknown".to_string(), |t| t.policy.clone());
    let config = json!({"run": config, "failed_trajectories": failed});
    Ok(aggregate(&results, run_id, &policy, config)?)
}

fn write_report(dir: &Path, report: &RunReport) -> Result<(), CliError> {
    io::write_json(&dir.join("report.json"), report)?;
    io::write_text(&dir.join("report.md"), &render_markdown(report))?;
    Ok(())
}

fn run_id(dir: &Path) -> String {
    dir.file_name().map_or("run".to_string(), |n| n.to_string_lossy().into_owned())
}

fn cmd_run(cfg: &mut RunConfig) -> Result<Value, CliError> {
    let corpus_path = existing(&cfg.corpus, "corpus")?;
    let tasks_path = existing(&cfg.tasks, "tasks")?;
    cfg.corpus = Some(corpus_path.clone());
    cfg.tasks = Some(tasks_path.clone());
    cfg.exec.seed = cfg.seed;
    cfg.exec.validate()?;
    let dir = output_dir(cfg)?;
    let corpus = load_corpus(&corpus_path)?;
    let episodes = read_tasks(&tasks_path)?;
    let registry = register_tools(corpus.domain());
    let policy = build_policy(cfg)?;
    let backend = build_backend(cfg)?;
    let mut trajectories = Vec::new();
    for s in 0..cfg.samples.max(1) {
        let exec = ExecConfig {
            seed: if cfg.samples <= 1 { cfg.seed } else { rng::derive_seed(cfg.seed, &format!("sample/{s}")) },
            ..cfg.exec.clone()
        };
        trajectories.extend(run_batch(&episodes, &corpus, policy.as_ref(), &registry, backend.as_ref(), &exec, cfg.workers)?);
    }
    let snapshot_value = serde_json::to_value(&*cfg).map_err(|e| CliError::Config(e.to_string()))?;
    write_run(&dir, &trajectories, &snapshot_value)?;
    let report = report_for(&trajectories, &episodes, &run_id(&dir), snapshot_value)?;
    write_report(&dir, &report)?;
    Ok(json!({
        "trajectories": trajectories.len(),
        "completed": trajectories.iter().filter(|t| t.is_completed()).count(),
        "avg_hr_pct": report.overall.avg_hr_pct,
        "mean_steps": report.overall.mean_steps,
        "out": dir,
    }))
}

fn cmd_eval(cfg: &mut RunConfig) -> Result<Value, CliError> {
    let tasks_path = existing(&cfg.tasks, "tasks")?;
    let traj_path = existing(&cfg.trajectories, "trajectories")?;
    cfg.tasks = Some(tasks_path.clone());
    cfg.trajectories = Some(traj_path.clone());
    let dir = output_dir(cfg)?;
    let episodes = read_tasks(&tasks_path)?;
    let trajectories = read_trajectories(&traj_path)?;
    let snapshot_value = serde_json::to_value(&*cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let report = report_for(&trajectories, &episodes, &run_id(&dir), snapshot_value)?;
    write_report(&dir, &report)?;
    snapshot(&dir, cfg)?;
    Ok(json!({"results": report.results.len(), "avg_hr_pct": report.overall.avg_hr_pct, "mean_steps": report.overall.mean_steps}))
}

fn cmd_emit(cfg: &mut RunConfig) -> Result<Value, CliError> {
    let corpus_path = existing(&cfg.corpus, "corpus")?;
    let tasks_path = existing(&cfg.tasks, "tasks")?;
    let traj_path = existing(&cfg.trajectories, "trajectories")?;
    cfg.corpus = Some(corpus_path.clone());
    cfg.tasks = Some(tasks_path.clone());
    cfg.trajectories = Some(traj_path.clone());
    let dir = output_dir(cfg)?;
    let corpus = load_corpus(&corpus_path)?;
    let episodes = read_tasks(&tasks_path)?;
    let trajectories = read_trajectories(&traj_path)?;
    let by_id: BTreeMap<&str, &Episode> = episodes.iter().map(|e| (e.episode_id.as_str(), e)).collect();
    let mut sft = Vec::new();
    for t in best_per_episode(&trajectories, cfg.exec.lambda) {
        let ep = by_id
            .get(t.episode_id.as_str())
            .ok_or_else(|| CliError::MissingInput(format!("no task for trajectory {}", t.episode_id)))?;
        sft.extend(emit_sft_records(t, ep, &corpus)?);
    }
    let pairs = build_preference_pairs(&trajectories, cfg.exec.lambda);
    let dpo = emit_dpo_records(&pairs, &episodes, &corpus)?;
    io::write_jsonl(&dir.join("sft.jsonl"), sft.iter())?;
    io::write_jsonl(&dir.join("dpo.jsonl"), dpo.iter())?;
    snapshot(&dir, cfg)?;
    Ok(json!({"sft_records": sft.len(), "dpo_records": dpo.len(), "out": dir}))
}

fn cmd_replay(run_dir: &Path) -> Result<Value, CliError> {
    let cfg_path = run_dir.join("runlog").join("config.json");
    if !cfg_path.exists() {
        return Err(CliError::MissingInput(format!("{} has no runlog/config.json", run_dir.display())));
    }
    let cfg: RunConfig = io::read_json(&cfg_path).map_err(|e| CliError::Config(e.to_string()))?;
    let corpus = load_corpus(&existing(&cfg.corpus, "corpus")?)?;
    let episodes = read_tasks(&existing(&cfg.tasks, "tasks")?)?;
    let log_path = run_dir.join("trajectories.jsonl");
    let logged = read_trajectories(&log_path)?;
    let raw = std::fs::read_to_string(&log_path).map_err(|e| IoError::Fs {
        path: log_path.clone(),
        source: e,
    })?;
    let lines: Vec<&str> = raw.lines().filter(|l| !l.trim().is_empty()).collect();
    let by_id: BTreeMap<&str, &Episode> = episodes.iter().map(|e| (e.episode_id.as_str(), e)).collect();
    let registry = register_tools(corpus.domain());
    let backend = HeuristicBackend;
    let mut verified = 0usize;
    let mut skipped = 0usize;
    for (i, t) in logged.iter().enumerate() {
        if !t.is_completed() {
            skipped += 1;
            continue;
        }
        let ep = by_id
            .get(t.episode_id.as_str())
            .ok_or_else(|| CliError::MissingInput(format!("no task for trajectory {}", t.episode_id)))?;
        let again = replay(t, ep, &corpus, &registry, &backend).map_err(|e| match e {
            ExecError::Divergence { step, message } => CliError::Replay(format!(
                "line {} ({}) diverged at step {step}: {message}",
                i + 1,
                t.episode_id
            )),
            other => CliError::Exec(other),
        })?;
        let line = serde_json::to_string(&again).map_err(|e| CliError::Config(e.to_string()))?;
        if line != lines[i] {
            return Err(CliError::Replay(format!(
                "line {} ({}): recomputed record differs from the log outside the steps",
                i + 1,
                t.episode_id
            )));
        }
        if matches!(t.backend, BackendKind::Heuristic | BackendKind::Synthetic) {
            verified += 1;
        }
    }
    Ok(json!({"replayed": logged.len() - skipped, "verified_outputs": verified, "skipped_failed": skipped}))
}

fn cmd_mine(cfg: &mut RunConfig, traces: &Path, op_table: Option<&Path>) -> Result<Value, CliError> {
    let dir = output_dir(cfg)?;
    if !traces.exists() {
        return Err(CliError::MissingInput(format!("traces {}", traces.display())));
    }
    let traces: Vec<CoTTrace> = io::read_jsonl(traces)?;
    let table = match op_table {
        Some(p) => OpTable::load(p)?,
        None => OpTable::default(),
    };
    let mut mining = cfg.mining.clone();
    mining.seed = cfg.seed;
    let out = mine(&traces, &table, &HashingEmbedder, &mining)?;
    write_mining_output(&dir, &out)?;
    snapshot(&dir, cfg)?;
    Ok(json!({
        "kept_traces": out.filter.kept,
        "domains": out.domains.iter().map(|d| json!({"domain": d.domain, "k": d.model.k, "steps": d.n_steps})).collect::<Vec<_>>(),
        "tools": out.mapping.tools.keys().collect::<Vec<_>>(),
        "needs_review": out.mapping.needs_review,
    }))
}

fn synthetic_world(cfg: &RunConfig) -> Result<SyntheticWorldData, CliError> {
    let suite = match &cfg.synthetic.suite {
        Some(p) => io::read_json(p)?,
        None => SyntheticSuite::three_archetypes(),
    };
    Ok(make_synthetic_world(&suite, cfg.synthetic.episodes, cfg.seed)?)
}

fn cmd_train_sft(cfg: &mut RunConfig, synthetic: Option<usize>) -> Result<Value, CliError> {
    let dir = output_dir(cfg)?;
    let exec = ExecConfig {
        seed: cfg.seed,
        ..cfg.exec.clone()
    };
    let (samples, extra) = if synthetic.is_some() || cfg.trajectories.is_none() {
        let data = synthetic_world(cfg)?;
        let registry = register_tools(data.corpus.domain());
        let trajs = oracle_trajectories(&data, &registry, &exec)?;
        (step_samples(&trajs), Some((data, registry, trajs)))
    } else {
        let trajs = read_trajectories(&existing(&cfg.trajectories, "trajectories")?)?;
        let best: Vec<Trajectory> = best_per_episode(&trajs, exec.lambda).into_iter().cloned().collect();
        (step_samples(&best), None)
    };
    let init = match &cfg.checkpoint {
        Some(p) => LinearPolicy::load(p)?,
        None => LinearPolicy::zeros(),
    };
    let (policy, report) = sft_train(&init, &samples, &cfg.train.sft, cfg.seed)?;
    policy.save(&dir.join("policy_sft.json"))?;
    let mut summary = json!({"samples": samples.len(), "initial_loss": report.initial_loss, "epoch_losses": report.epoch_losses});
    if let Some((data, registry, trajs)) = extra {
        let runs = run_batch(&data.episodes, &data.corpus, &policy, &registry, &data.backend, &exec, cfg.workers)?;
        let rate = plan_match_rate(&runs, &trajs);
        summary["train_plan_match"] = json!(rate);
    }
    io::write_json(&dir.join("sft_report.json"), &summary)?;
    snapshot(&dir, cfg)?;
    Ok(summary)
}

fn cmd_train_dpo(cfg: &mut RunConfig, synthetic: Option<usize>) -> Result<Value, CliError> {
    let dir = output_dir(cfg)?;
    let ckpt = existing(&cfg.checkpoint, "checkpoint")?;
    let reference = LinearPolicy::load(&ckpt)?;
    let exec = ExecConfig {
        seed: cfg.seed,
        ..cfg.exec.clone()
    };
    let pairs = if synthetic.is_some() || cfg.trajectories.is_none() {
        let data = synthetic_world(cfg)?;
        let registry = register_tools(data.corpus.domain());
        let rollouts = sample_rollouts(
            &reference,
            cfg.train.sample_temperature,
            cfg.train.samples_per_episode,
            &data.episodes,
            &data.corpus,
            &registry,
            &data.backend,
            &exec,
            cfg.workers,
        )?;
        build_preference_pairs(&rollouts, exec.lambda)
    } else {
        let trajs = read_trajectories(&existing(&cfg.trajectories, "trajectories")?)?;
        build_preference_pairs(&trajs, exec.lambda)
    };
    if pairs.is_empty() {
        return Err(CliError::MissingInput("no preference pairs could be formed".into()));
    }
    let (policy, report) = dpo_train(&reference, &reference, &pairs, &cfg.train.dpo, cfg.seed)?;
    policy.save(&dir.join("policy_dpo.json"))?;
    io::write_json(&dir.join("dpo_report.json"), &report)?;
    snapshot(&dir, cfg)?;
    Ok(json!({
        "pairs": pairs.len(),
        "initial_loss": report.initial_loss,
        "epoch_losses": report.epoch_losses,
        "satisfaction_before": report.satisfaction_before,
        "satisfaction_after": report.satisfaction_after,
    }))
}

fn cmd_oracle(cfg: &mut RunConfig) -> Result<Value, CliError> {
    let dir = output_dir(cfg)?;
    let data = synthetic_world(cfg)?;
    let registry = register_tools(data.corpus.domain());
    let mut cache: BTreeMap<usize, Value> = BTreeMap::new();
    let mut rows = Vec::new();
    for (i, ep) in data.episodes.iter().enumerate() {
        let a = data.archetype_of[i];
        if !cache.contains_key(&a) {
            let plan = brute_force_optimal_plan(data.world_of(i), &registry, &cfg.exec)?;
            cache.insert(a, serde_json::to_value(&plan).map_err(|e| CliError::Config(e.to_string()))?);
        }
        rows.push(json!({"episode_id": ep.episode_id, "archetype": a, "plan": cache[&a]}));
    }
    io::write_jsonl(&dir.join("oracle_plans.jsonl"), rows.iter())?;
    snapshot(&dir, cfg)?;
    Ok(json!({"episodes": rows.len(), "plans": cache}))
}
