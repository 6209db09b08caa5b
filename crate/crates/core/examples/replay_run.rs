//! Log a run to disk, replay it against the log, then flip one digit inside a
//! logged tool output and watch replay name the step that diverged.

use agentrec::cli::episode_pool;
use agentrec::corpus::load_corpus;
use agentrec::executor::{read_trajectories, replay, run_batch, write_run, ExecError};
use agentrec::planner::GreedyHeuristicPolicy;
use agentrec::toolkit::{register_tools, HeuristicBackend};
use agentrec::{ExecConfig, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let corpus = load_corpus(&root.join("fixtures/yelp_small"))?;
    let (mut episodes, _) = episode_pool(&corpus, &[Scenario::Classic], 5)?;
    episodes.truncate(8);
    let registry = register_tools(corpus.domain());
    let trajectories = run_batch(&episodes, &corpus, &GreedyHeuristicPolicy::default(), &registry, &HeuristicBackend, &ExecConfig::default(), 2)?;

    let dir = tempfile::tempdir()?;
    write_run(dir.path(), &trajectories, &serde_json::json!({"example": "replay_run"}))?;
    let log = dir.path().join("trajectories.jsonl");
    for (logged, ep) in read_trajectories(&log)?.iter().zip(&episodes) {
        let again = replay(logged, ep, &corpus, &registry, &HeuristicBackend)?;
        assert_eq!(&again, logged);
    }
    println!("{} trajectories replayed identically", trajectories.len());

    // Tamper with a confidence value of the first tool output.
    let text = std::fs::read_to_string(&log)?;
    let first_line = text.lines().next().unwrap_or_default();
    let at = first_line.find("\"confidence\":0.").ok_or("no confidence field")? + "\"confidence\":0.".len();
    let mut bytes = first_line.as_bytes().to_vec();
    bytes[at] = if bytes[at] == b'1' { b'2' } else { b'1' };
    let tampered: agentrec::Trajectory = serde_json::from_slice(&bytes)?;
    match replay(&tampered, &episodes[0], &corpus, &registry, &HeuristicBackend) {
        Err(ExecError::Divergence { step, message }) => println!("tampered log caught at step {step}: {message}"),
        other => println!("tampering went unnoticed: {other:?}"),
    }
    Ok(())
}
