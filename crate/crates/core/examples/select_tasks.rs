//! Distribution-matched task selection: pick a subset of candidate episodes
//! whose statistics track a reference profile, and compare against random
//! subsets of the same size.

use agentrec::cli::episode_pool;
use agentrec::corpus::load_corpus;
use agentrec::environment::{greedy_select_tasks, selection_objective, EpisodeStats, ReferenceProfile, SelectionWeights};
use agentrec::Scenario;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let corpus = load_corpus(&root.join("fixtures/yelp_small"))?;
    let (pool, _) = episode_pool(&corpus, &Scenario::ALL, 0)?;
    let stats: Vec<EpisodeStats> = pool.iter().map(|e| EpisodeStats::from_episode(&corpus, e)).collect::<Result<_, _>>()?;

    // Reference: the classic-scenario slice of the pool.
    let classic: Vec<EpisodeStats> = stats
        .iter()
        .zip(&pool)
        .filter(|(_, e)| e.scenario == Scenario::Classic)
        .map(|(s, _)| s.clone())
        .collect();
    let reference = ReferenceProfile::from_stats(&classic)?;
    let weights = SelectionWeights::default();
    let n = 40.min(stats.len());
    let result = greedy_select_tasks(&stats, &reference, n, 4, 0, &weights)?;
    println!("greedy objective {:.4} after {} picks", result.objective, result.selected.len());
    println!("first picks: {:?}", &result.selected[..5.min(result.selected.len())]);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut random = Vec::new();
    for _ in 0..20 {
        let mut s: Vec<&EpisodeStats> = stats.iter().collect();
        s.shuffle(&mut rng);
        s.truncate(n);
        random.push(selection_objective(&s, &reference, n, &weights));
    }
    println!("random subsets: mean objective {:.4}", random.iter().sum::<f64>() / random.len() as f64);
    Ok(())
}
