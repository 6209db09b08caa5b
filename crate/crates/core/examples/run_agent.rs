//! Build episodes from a corpus, route each one with the greedy heuristic
//! planner over the heuristic tool backend, and print a scenario report.
//!
//! ```text
//! cargo run --example run_agent -- [corpus_dir]
//! ```

use std::path::PathBuf;

use agentrec::cli::{episode_pool, report_for};
use agentrec::corpus::load_corpus;
use agentrec::eval::render_markdown;
use agentrec::executor::run_batch;
use agentrec::planner::GreedyHeuristicPolicy;
use agentrec::toolkit::{register_tools, HeuristicBackend};
use agentrec::{ExecConfig, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/yelp_small"));
    let corpus = load_corpus(&dir)?;
    let (episodes, skipped) = episode_pool(&corpus, &Scenario::ALL, 0)?;
    println!("{} episodes ({skipped} user/scenario combinations skipped)", episodes.len());

    let registry = register_tools(corpus.domain());
    let policy = GreedyHeuristicPolicy::default();
    let trajectories = run_batch(&episodes, &corpus, &policy, &registry, &HeuristicBackend, &ExecConfig::default(), 4)?;

    let first = &trajectories[0];
    println!("\n{} -> rank {:?}", first.episode_id, first.rank_of_positive);
    for s in &first.steps {
        println!("  step {}: {}", s.step_index, s.action);
    }

    let report = report_for(&trajectories, &episodes, "example", serde_json::json!({}))?;
    println!("\n{}", render_markdown(&report));
    Ok(())
}
