//! The provider-backed planner, driven by a scripted transport so it runs
//! offline. The second reply names an infeasible tool; the planner asks once
//! for a correction and then falls back to the greedy heuristic.

use std::sync::Arc;

use agentrec::cli::episode_pool;
use agentrec::corpus::load_corpus;
use agentrec::executor::run_episode;
use agentrec::planner::ProviderPlanner;
use agentrec::provider::{ProviderClient, ProviderConfig, ScriptedTransport};
use agentrec::toolkit::{register_tools, HeuristicBackend};
use agentrec::{ExecConfig, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let corpus = load_corpus(&root.join("fixtures/yelp_small"))?;
    let (episodes, _) = episode_pool(&corpus, &[Scenario::Classic], 0)?;

    let transport = Arc::new(ScriptedTransport::new([
        "LongTermPreference",
        "Teleport",
        "still not a tool",
        "GeoContext",
        "CandidateRank",
    ]));
    let client = ProviderClient::new(ProviderConfig::default(), transport.clone());
    let planner = ProviderPlanner::new(client);
    let registry = register_tools(corpus.domain());
    let traj = run_episode(&episodes[0], &corpus, &planner, &registry, &HeuristicBackend, &ExecConfig::default())?;

    let names: Vec<&str> = traj.actions().iter().map(|t| t.as_str()).collect();
    println!("plan: {}", names.join(" > "));
    println!("rank of positive: {:?}", traj.rank_of_positive);
    println!("{} planner requests, {} fallbacks", transport.requests().len(), planner.fallback_count());
    Ok(())
}
