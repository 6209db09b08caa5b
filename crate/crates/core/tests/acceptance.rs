//! Acceptance suite: every criterion runs at its stated tolerance and time
//! limit and prints one PASS/FAIL line. Built without the libtest harness so
//! the lines always show in `cargo test` output.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use agentrec::cli::episode_pool;
use agentrec::corpus::load_corpus;
use agentrec::environment::{
    generate_corpus, greedy_select_tasks, make_synthetic_world, selection_objective, CorpusGenConfig, Episode,
    EpisodeFactory, EpisodeStats, ReferenceProfile, ScenarioSpec, SelectionWeights, SyntheticSuite, SyntheticWorldData,
};
use agentrec::eval::{avg_hr, hr_at_k, score_order, RankScore, RunReport};
use agentrec::executor::{run_batch, Decision, ExecError, Policy};
use agentrec::mining::{kmeans, select_k, KMeansConfig};
use agentrec::planner::{
    build_preference_pairs, dpo_gradient, dpo_loss, dpo_train, oracle_trajectories, plan_match_rate, sample_rollouts,
    sft_gradient, sft_loss, sft_train, step_samples, DpoConfig, DpoRecord, LinearPolicy, PreferencePair, RandomPolicy,
    SftConfig, SftRecord, StepSample, TrainConfig, N_FEATURES,
};
use agentrec::toolkit::{geo_score, register_tools, HeuristicBackend, ToolRegistry};
use agentrec::{Domain, ExecConfig, Scenario, ToolName, Trajectory};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agentrec"))
        .args(args)
        .output()
        .expect("spawn agentrec")
}

fn cli_ok(args: &[&str]) -> Result<Output, String> {
    let out = cli(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!("`{}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// 1 ------------------------------------------------------------------------

fn protocol_conformance() -> Check {
    let cfg = CorpusGenConfig {
        domain: Domain::Amazon,
        n_users: 120,
        n_items: 500,
        history_len: (4, 45),
        ..CorpusGenConfig::default()
    };
    let corpus = generate_corpus(&cfg, 3).map_err(|e| e.to_string())?;
    let factory = EpisodeFactory::new(&corpus);
    let users: Vec<String> = corpus.users().map(|u| u.user_id.clone()).collect();

    // Full interaction history per user, read straight off the records.
    let mut history: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for r in corpus.interactions() {
        history.entry(r.user_id.as_str()).or_default().insert(r.item_id.as_str());
    }

    let mut episodes = Vec::new();
    'outer: for seed in 0..10u64 {
        for u in &users {
            for s in Scenario::ALL {
                if let Ok(ep) = factory.generate(u, &ScenarioSpec::new(s), seed) {
                    episodes.push(ep);
                    if episodes.len() == 1000 {
                        break 'outer;
                    }
                }
            }
        }
    }
    ensure(episodes.len() == 1000, || format!("only {} episodes generated", episodes.len()))?;

    for ep in &episodes {
        let distinct: BTreeSet<&str> = ep.candidate_ids.iter().map(String::as_str).collect();
        ensure(ep.candidate_ids.len() == 20 && distinct.len() == 20, || format!("{}: candidate set", ep.episode_id))?;
        let n_pos = ep.candidate_ids.iter().filter(|c| **c == ep.positive_id).count();
        ensure(n_pos == 1, || format!("{}: {n_pos} positives", ep.episode_id))?;
        let hist = &history[ep.user_id.as_str()];
        ensure(hist.contains(ep.positive_id.as_str()), || format!("{}: positive not in history", ep.episode_id))?;
        for c in ep.candidate_ids.iter().filter(|c| **c != ep.positive_id) {
            ensure(!hist.contains(c.as_str()), || format!("{}: negative {c} is in history", ep.episode_id))?;
        }
    }

    let again = EpisodeFactory::new(&corpus);
    for ep in &episodes {
        let user = ep.user_id.as_str();
        let requested = ep.episode_id.split(':').nth(1).unwrap();
        let seed: u64 = ep.episode_id.rsplit(':').next().unwrap().parse().unwrap();
        let scenario = Scenario::ALL.iter().copied().find(|s| s.as_str() == requested).unwrap();
        let b = again.generate(user, &ScenarioSpec::new(scenario), seed).map_err(|e| e.to_string())?;
        ensure(serde_json::to_vec(ep).unwrap() == serde_json::to_vec(&b).unwrap(), || {
            format!("{} regenerated differently", ep.episode_id)
        })?;
    }
    Ok("1000 episodes; 20 candidates, one positive, disjoint negatives; regeneration byte-identical".into())
}

// 2 ------------------------------------------------------------------------

fn metric_oracle() -> Check {
    for rank in 1..=20u32 {
        let mut hits = 0;
        for k in [1u32, 3, 5] {
            let want = u8::from(rank <= k);
            hits += want;
            let got = hr_at_k(rank, k).map_err(|e| e.to_string())?;
            ensure(got == want, || format!("hr@{k}({rank}) = {got}, want {want}"))?;
        }
        let want = f64::from(hits) / 3.0;
        let got = avg_hr(rank).map_err(|e| e.to_string())?;
        ensure((got - want).abs() < 1e-12, || format!("avg_hr({rank}) = {got}, want {want}"))?;
        let s = RankScore::from_rank(rank).map_err(|e| e.to_string())?;
        ensure(s.avg_hr == got && s.rank_of_positive == rank, || format!("RankScore({rank})"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut order: Vec<String> = (0..20).map(|i| format!("c{i:02}")).collect();
    let n = 20_000;
    let mut total = 0.0;
    for _ in 0..n {
        order.shuffle(&mut rng);
        total += score_order(&order, "c07").map_err(|e| e.to_string())?.avg_hr;
    }
    let m = total / n as f64;
    ensure((m - 0.15).abs() <= 0.01, || format!("random-ranking Avg HR {m:.4}"))?;
    Ok(format!("ranks 1..20 match; random rankings over {n} episodes give Avg HR {m:.4}"))
}

// 3 ------------------------------------------------------------------------

/// Wraps the random policy and checks every decision it is shown.
struct Probe {
    inner: RandomPolicy,
    seen: Mutex<HashMap<String, Vec<String>>>,
    violations: Mutex<Vec<String>>,
}

impl Policy for Probe {
    fn name(&self) -> String {
        "probe".into()
    }

    fn act(&self, d: &Decision<'_>) -> Result<ToolName, ExecError> {
        let mut bad = Vec::new();
        if d.feasible.is_empty() {
            bad.push(format!("{}: empty feasible set at step {}", d.state.episode_id, d.state.step));
        }
        if d.state.memory.len() != d.state.step {
            bad.push(format!("{}: memory length {} at step {}", d.state.episode_id, d.state.memory.len(), d.state.step));
        }
        let rendered = serde_json::to_string(d.state).unwrap();
        if rendered.contains("positive_id") {
            bad.push(format!("{}: state exposes positive_id", d.state.episode_id));
        }
        let memory: Vec<String> = d.state.memory.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
        {
            let mut seen = self.seen.lock().unwrap();
            let prev = seen.entry(d.state.episode_id.clone()).or_default();
            if memory.len() != prev.len() + usize::from(d.state.step > 0) || !memory.starts_with(prev) {
                bad.push(format!("{}: memory is not an append-only extension", d.state.episode_id));
            }
            *prev = memory;
        }
        if !bad.is_empty() {
            self.violations.lock().unwrap().extend(bad);
        }
        self.inner.act(d)
    }
}

fn executor_invariants() -> Check {
    let corpus = load_corpus(&fixture("yelp_small")).map_err(|e| e.to_string())?;
    let (pool, _) = episode_pool(&corpus, &Scenario::ALL, 0).map_err(|e| e.to_string())?;
    let registry = register_tools(corpus.domain());
    let mut n = 0usize;
    let mut batch = 0u64;
    let mut lengths = BTreeMap::new();
    while n < 5000 {
        let probe = Probe {
            inner: RandomPolicy,
            seen: Mutex::new(HashMap::new()),
            violations: Mutex::new(Vec::new()),
        };
        let config = ExecConfig {
            seed: batch,
            ..ExecConfig::default()
        };
        let trajs = run_batch(&pool, &corpus, &probe, &registry, &HeuristicBackend, &config, 4).map_err(|e| e.to_string())?;
        if let Some(v) = probe.violations.lock().unwrap().first() {
            return Err(v.clone());
        }
        for t in &trajs {
            ensure(t.is_completed(), || format!("{} did not complete", t.episode_id))?;
            ensure(t.steps.len() <= config.t_max, || format!("{} took {} steps", t.episode_id, t.steps.len()))?;
            let ranks = t.steps.iter().filter(|s| s.action == ToolName::CandidateRank).count();
            ensure(ranks == 1 && t.steps.last().unwrap().action == ToolName::CandidateRank, || {
                format!("{}: CandidateRank not exactly once and last", t.episode_id)
            })?;
            *lengths.entry(t.steps.len()).or_insert(0usize) += 1;
        }
        n += trajs.len();
        batch += 1;
    }

    // Moving the hidden positive to another candidate must not change a
    // single observation, decision or the emitted ranking.
    let config = ExecConfig {
        seed: 99,
        ..ExecConfig::default()
    };
    let swapped: Vec<Episode> = pool
        .iter()
        .map(|e| {
            let mut s = e.clone();
            s.positive_id = e.candidate_ids.iter().find(|c| **c != e.positive_id).unwrap().clone();
            s
        })
        .collect();
    let a = run_batch(&pool, &corpus, &RandomPolicy, &registry, &HeuristicBackend, &config, 4).map_err(|e| e.to_string())?;
    let b = run_batch(&swapped, &corpus, &RandomPolicy, &registry, &HeuristicBackend, &config, 4).map_err(|e| e.to_string())?;
    for (x, y) in a.iter().zip(&b) {
        ensure(x.steps == y.steps && x.final_ranking == y.final_ranking, || {
            format!("{}: behaviour depends on which candidate is positive", x.episode_id)
        })?;
    }
    Ok(format!("{n} fuzzed episodes, plan lengths {lengths:?}; positive-swap probe on {} episodes", pool.len()))
}

// 4 ------------------------------------------------------------------------

fn geo_anchor() -> Check {
    let a = geo_score(0.44).map_err(|e| e.to_string())?;
    let b = geo_score(1.593).map_err(|e| e.to_string())?;
    ensure((a - 0.957).abs() <= 0.001, || format!("geo_score(0.44) = {a}"))?;
    ensure((b - 0.853).abs() <= 0.001, || format!("geo_score(1.593) = {b}"))?;
    Ok(format!("geo_score(0.44) = {a:.4}, geo_score(1.593) = {b:.4}"))
}

// 5 ------------------------------------------------------------------------

/// Minimum within-cluster sum of squares over every partition of the points
/// into exactly `k` non-empty clusters.
fn exhaustive_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let used: BTreeSet<usize> = labels.iter().copied().collect();
        if used.len() == k {
            let mut total = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                let dim = members[0].len();
                let centroid: Vec<f64> =
                    (0..dim).map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64).collect();
                total += members
                    .iter()
                    .map(|m| m.iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .sum::<f64>();
            }
            best = best.min(total);
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

fn kmeans_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = KMeansConfig {
        restarts: 50,
        ..KMeansConfig::default()
    };
    let mut n_fixtures = 0;
    let mut n_traces = 0;
    for f in 0..30u64 {
        let n = rng.random_range(3..=10usize);
        let dim = rng.random_range(1..=3usize);
        let k = rng.random_range(2..=3usize).min(n);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let model = kmeans(&points, k, f, &cfg).map_err(|e| e.to_string())?;
        let opt = exhaustive_inertia(&points, k);
        ensure((model.inertia - opt).abs() <= 1e-9, || {
            format!("fixture {f} (n={n}, k={k}): k-means {} vs exhaustive {opt}", model.inertia)
        })?;
        for t in &model.traces {
            ensure(t.windows(2).all(|w| w[1] <= w[0] + 1e-12), || format!("fixture {f}: inertia increased in {t:?}"))?;
            n_traces += 1;
        }
        n_fixtures += 1;
    }
    let normal = Normal::new(0.0, 0.3).unwrap();
    let mut blobs = Vec::new();
    for center in [[-5.0, 0.0], [5.0, 1.0]] {
        for _ in 0..40 {
            blobs.push(vec![center[0] + normal.sample(&mut rng), center[1] + normal.sample(&mut rng)]);
        }
    }
    let (model, diag) = select_k(&blobs, (2, 8), 1, &KMeansConfig::default()).map_err(|e| e.to_string())?;
    ensure(model.k == 2, || format!("select_k chose {} on two blobs ({diag:?})", model.k))?;
    Ok(format!("{n_fixtures} fixtures at the exhaustive optimum, {n_traces} Lloyd runs monotone, two blobs -> k = 2"))
}

// 6 ------------------------------------------------------------------------

fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<StepSample> {
    (0..n)
        .map(|_| {
            let mut feasible: Vec<ToolName> = ToolName::ALL.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
            if feasible.is_empty() {
                feasible.push(ToolName::ALL[rng.random_range(0..ToolName::ALL.len())]);
            }
            let action = feasible[rng.random_range(0..feasible.len())];
            StepSample {
                features: (0..N_FEATURES).map(|_| rng.random_range(0.0..1.0)).collect(),
                feasible,
                action,
            }
        })
        .collect()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central_difference(theta: &[f64], f: impl Fn(&LinearPolicy) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..theta.len())
        .map(|i| {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[i] += h;
            minus[i] -= h;
            (f(&LinearPolicy::from_vec(&plus).unwrap()) - f(&LinearPolicy::from_vec(&minus).unwrap())) / (2.0 * h)
        })
        .collect()
}

fn gradient_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_sft: f64 = 0.0;
    let mut worst_dpo: f64 = 0.0;
    let mut worst_ln2: f64 = 0.0;
    for i in 0..100u64 {
        let policy = LinearPolicy::random(i, 0.5);
        let theta = policy.to_vec();

        let n = rng.random_range(1..=8);
        let samples = random_samples(&mut rng, n);
        let analytic = sft_gradient(&policy, &samples).map_err(|e| e.to_string())?.to_vec();
        let numeric = central_difference(&theta, |p| sft_loss(p, &samples).unwrap());
        worst_sft = worst_sft.max(relative_error(&analytic, &numeric));

        let reference = LinearPolicy::random(1000 + i, 0.5);
        let beta = [0.1, 0.5, 1.0][i as usize % 3];
        let pairs: Vec<PreferencePair> = (0..rng.random_range(1..=4))
            .map(|_| {
                let (wl, ll) = (rng.random_range(1..=4), rng.random_range(1..=4));
                PreferencePair {
                    episode_id: "e".into(),
                    winner: vec![],
                    loser: vec![],
                    winner_reward: 1.0,
                    loser_reward: 0.0,
                    winner_steps: random_samples(&mut rng, wl),
                    loser_steps: random_samples(&mut rng, ll),
                }
            })
            .collect();
        let analytic = dpo_gradient(&policy, &reference, &pairs, beta).map_err(|e| e.to_string())?.to_vec();
        let numeric = central_difference(&theta, |p| dpo_loss(p, &reference, &pairs, beta).unwrap());
        worst_dpo = worst_dpo.max(relative_error(&analytic, &numeric));

        let at_ref = dpo_loss(&policy, &policy, &pairs, beta).map_err(|e| e.to_string())?;
        worst_ln2 = worst_ln2.max((at_ref - std::f64::consts::LN_2).abs());
    }
    ensure(worst_sft < 1e-4, || format!("SFT gradient relative error {worst_sft:e}"))?;
    ensure(worst_dpo < 1e-4, || format!("DPO gradient relative error {worst_dpo:e}"))?;
    ensure(worst_ln2 <= 1e-9, || format!("DPO loss at the reference is off ln 2 by {worst_ln2:e}"))?;
    Ok(format!("100 instances; max rel. error SFT {worst_sft:.1e}, DPO {worst_dpo:.1e}; |loss - ln 2| <= {worst_ln2:.1e}"))
}

// 7, 8 -----------------------------------------------------------------------

const SFT_EPOCHS: usize = 10;

struct Worlds {
    suite: SyntheticSuite,
    train: SyntheticWorldData,
    held_out: SyntheticWorldData,
    registry: ToolRegistry,
    exec: ExecConfig,
}

fn worlds() -> Result<Worlds, String> {
    let suite = SyntheticSuite::three_archetypes();
    let train = make_synthetic_world(&suite, 300, 1).map_err(|e| e.to_string())?;
    let held_out = make_synthetic_world(&suite, 300, 2).map_err(|e| e.to_string())?;
    let registry = register_tools(train.corpus.domain());
    Ok(Worlds {
        suite,
        train,
        held_out,
        registry,
        exec: ExecConfig::default(),
    })
}

fn sft_policy(w: &Worlds) -> Result<(LinearPolicy, Vec<Trajectory>), String> {
    let oracle = oracle_trajectories(&w.train, &w.registry, &w.exec).map_err(|e| e.to_string())?;
    let cfg = SftConfig {
        epochs: SFT_EPOCHS,
        ..SftConfig::default()
    };
    let (policy, _) = sft_train(&LinearPolicy::zeros(), &step_samples(&oracle), &cfg, 0).map_err(|e| e.to_string())?;
    Ok((policy, oracle))
}

fn greedy_on(p: &LinearPolicy, data: &SyntheticWorldData, w: &Worlds) -> Result<Vec<Trajectory>, String> {
    run_batch(&data.episodes, &data.corpus, p, &w.registry, &data.backend, &w.exec, 4).map_err(|e| e.to_string())
}

fn oracle_recovery() -> Check {
    let w = worlds()?;
    let distinct: BTreeSet<Vec<ToolName>> = w.suite.archetypes.iter().map(|a| a.world.required_evidence.iter().copied().collect()).collect();
    ensure(w.suite.archetypes.len() == 3 && distinct.len() == 3, || "archetypes must differ in required evidence".into())?;
    let (policy, _) = sft_policy(&w)?;
    let held_oracle = oracle_trajectories(&w.held_out, &w.registry, &w.exec).map_err(|e| e.to_string())?;
    let runs = greedy_on(&policy, &w.held_out, &w)?;
    let rate = plan_match_rate(&runs, &held_oracle);
    ensure(rate >= 0.95, || format!("held-out plan match {rate:.3}"))?;
    Ok(format!("held-out greedy plan match {rate:.3} over {} episodes", runs.len()))
}

/// Noise draws averaged over; the seeds are disjoint from any used while
/// choosing the DPO settings.
const PERTURBATION_SEEDS: std::ops::Range<u64> = 1001..1101;

fn dpo_improvement() -> Check {
    let w = worlds()?;
    let (sft, _) = sft_policy(&w)?;
    let defaults = TrainConfig::default();
    let dpo_cfg = DpoConfig {
        lr: 0.1,
        ..DpoConfig::default()
    };
    let sft_runs = greedy_on(&sft, &w.held_out, &w)?;
    let sft_len = mean(sft_runs.iter().map(|t| t.steps.len() as f64));

    let (mut noisy_reward, mut dpo_reward, mut dpo_len) = (Vec::new(), Vec::new(), Vec::new());
    for seed in PERTURBATION_SEEDS {
        let noisy = sft.perturbed(0.5, seed);
        let rollouts = sample_rollouts(
            &noisy,
            defaults.sample_temperature,
            defaults.samples_per_episode,
            &w.train.episodes,
            &w.train.corpus,
            &w.registry,
            &w.train.backend,
            &ExecConfig { seed, ..w.exec.clone() },
            4,
        )
        .map_err(|e| e.to_string())?;
        let pairs = build_preference_pairs(&rollouts, w.exec.lambda);
        let tuned = if pairs.is_empty() {
            noisy.clone()
        } else {
            dpo_train(&noisy, &sft, &pairs, &dpo_cfg, seed).map_err(|e| e.to_string())?.0
        };
        let a = greedy_on(&noisy, &w.held_out, &w)?;
        let b = greedy_on(&tuned, &w.held_out, &w)?;
        noisy_reward.push(mean(a.iter().map(|t| t.reward)));
        dpo_reward.push(mean(b.iter().map(|t| t.reward)));
        dpo_len.push(mean(b.iter().map(|t| t.steps.len() as f64)));
    }
    let (r0, r1, len) = (mean(noisy_reward.iter().copied()), mean(dpo_reward.iter().copied()), mean(dpo_len.iter().copied()));
    let worse = noisy_reward.iter().zip(&dpo_reward).filter(|(a, b)| b < a).count();
    let detail = format!(
        "{} draws: perturbed reward {r0:.4} -> DPO {r1:.4} ({:+.4}); plan length SFT {sft_len:.2}, DPO {len:.2}; DPO worse on {worse} draws",
        noisy_reward.len(),
        r1 - r0
    );
    ensure(r1 >= r0 + 0.05, || detail.clone())?;
    ensure((len - sft_len).abs() <= 1.0, || detail.clone())?;
    Ok(detail)
}

// 9 ------------------------------------------------------------------------

fn stats_draw(rng: &mut ChaCha8Rng, id: String, pop_mu: f64, hist: (usize, usize), recency: f64) -> EpisodeStats {
    let pop = Normal::new(pop_mu, 1.0).unwrap();
    EpisodeStats {
        episode_id: id,
        candidate_popularity: (0..20).map(|_| pop.sample(rng).exp().floor() as u64).collect(),
        history_len: rng.random_range(hist.0..=hist.1),
        recency_days: Some(rng.random_range(0.0..recency)),
        geo_coverage: None,
    }
}

fn greedy_matching() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pool: Vec<EpisodeStats> = (0..500)
        .map(|i| {
            let mu = [0.5, 2.0, 3.5][i % 3];
            let hist = [(1, 5), (5, 40), (40, 300)][(i / 3) % 3];
            stats_draw(&mut rng, format!("p{i:03}"), mu, hist, 200.0)
        })
        .collect();
    let target: Vec<EpisodeStats> = (0..200).map(|i| stats_draw(&mut rng, format!("r{i:03}"), 2.5, (8, 60), 60.0)).collect();
    let reference = ReferenceProfile::from_stats(&target).map_err(|e| e.to_string())?;
    let weights = SelectionWeights::default();
    let result = greedy_select_tasks(&pool, &reference, 100, 4, 0, &weights).map_err(|e| e.to_string())?;

    let mut random = Vec::new();
    for _ in 0..20 {
        let mut s: Vec<&EpisodeStats> = pool.iter().collect();
        s.shuffle(&mut rng);
        s.truncate(100);
        random.push(selection_objective(&s, &reference, 100, &weights));
    }
    let random_mean = mean(random.iter().copied());
    ensure(result.objective <= random_mean, || format!("greedy {} vs random mean {random_mean}", result.objective))?;
    let trace = &result.objective_trace;
    ensure(trace.len() == 100 && trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), || {
        format!("objective trace is not non-increasing: {trace:?}")
    })?;
    Ok(format!("greedy objective {:.4} vs random-subset mean {random_mean:.4}; trace non-increasing", result.objective))
}

// 10 -----------------------------------------------------------------------

fn step_span(line: &str, step: usize) -> (usize, usize) {
    let start = line.find(&format!("\"step_index\":{step},")).expect("step present");
    let end = line[start + 1..]
        .find(&format!("\"step_index\":{},", step + 1))
        .map_or(line.len(), |e| start + 1 + e);
    (start, end)
}

/// Byte offset of a digit to flip inside step `step`: in its output when
/// `in_output`, else in its feature vector.
fn tamper_offset(line: &str, step: usize, in_output: bool) -> Option<usize> {
    let (start, end) = step_span(line, step);
    let span = &line[start..end];
    if in_output {
        let at = span.find("\"confidence\":")? + "\"confidence\":".len();
        let dot = span[at..].find('.')? + at;
        Some(start + dot + 1)
    } else {
        Some(start + span.find("\"features\":[")? + "\"features\":[".len())
    }
}

fn replay_determinism(tmp: &Path) -> Check {
    let corpus = fixture("yelp_small");
    let corpus = corpus.to_str().unwrap();
    let tasks = tmp.join("r_tasks");
    let run = tmp.join("r_run");
    cli_ok(&["make-tasks", "--corpus", corpus, "--out", tasks.to_str().unwrap(), "--select", "40"])?;
    let tasks_file = tasks.join("tasks.jsonl");
    cli_ok(&["run", "--corpus", corpus, "--tasks", tasks_file.to_str().unwrap(), "--out", run.to_str().unwrap()])?;
    cli_ok(&["replay", "--run", run.to_str().unwrap()])?;

    let log_path = run.join("trajectories.jsonl");
    let original = std::fs::read_to_string(&log_path).unwrap();
    let lines: Vec<&str> = original.lines().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut caught = 0;
    for trial in 0..8 {
        let li = rng.random_range(0..lines.len());
        let traj: Trajectory = serde_json::from_str(lines[li]).unwrap();
        let step = rng.random_range(0..traj.steps.len() - 1);
        let in_output = trial % 2 == 0;
        let Some(off) = tamper_offset(lines[li], step, in_output) else { continue };
        let mut bytes = original.clone().into_bytes();
        let line_start: usize = lines[..li].iter().map(|l| l.len() + 1).sum();
        let b = &mut bytes[line_start + off];
        *b = if *b == b'9' { b'8' } else if b.is_ascii_digit() { *b + 1 } else { return Err(format!("offset hit {:?}", *b as char)) };
        std::fs::write(&log_path, &bytes).unwrap();
        let out = cli(&["replay", "--run", run.to_str().unwrap()]);
        std::fs::write(&log_path, &original).unwrap();
        let stderr = String::from_utf8_lossy(&out.stderr);
        ensure(!out.status.success(), || format!("tampered byte in line {} step {step} went unnoticed", li + 1))?;
        ensure(stderr.contains(&format!("line {}", li + 1)) && stderr.contains(&format!("at step {step}:")), || {
            format!("tamper at line {} step {step} reported as {stderr}", li + 1)
        })?;
        caught += 1;
    }
    ensure(caught >= 6, || format!("only {caught} tamper trials could be placed"))?;
    cli_ok(&["replay", "--run", run.to_str().unwrap()])?;
    Ok(format!("{} trajectories replay byte-identically; {caught}/{caught} tampered bytes caught at the right step", lines.len()))
}

// 11 -----------------------------------------------------------------------

fn has_keys(v: &serde_json::Value, keys: &[&str]) -> bool {
    v.as_object().is_some_and(|o| o.len() == keys.len() && keys.iter().all(|k| o.contains_key(*k)))
}

fn end_to_end(tmp: &Path) -> Check {
    let corpus = fixture("yelp_small");
    let corpus = corpus.to_str().unwrap();
    let d = |s: &str| tmp.join(s).to_str().unwrap().to_string();
    cli_ok(&["make-tasks", "--corpus", corpus, "--out", &d("e_tasks"), "--select", "30"])?;
    let tasks = d("e_tasks/tasks.jsonl");
    cli_ok(&["run", "--corpus", corpus, "--tasks", &tasks, "--out", &d("e_run"), "--policy", "random", "--samples", "4"])?;
    let trajs = d("e_run/trajectories.jsonl");
    cli_ok(&["eval", "--tasks", &tasks, "--trajectories", &trajs, "--out", &d("e_eval")])?;
    cli_ok(&["emit-datasets", "--corpus", corpus, "--tasks", &tasks, "--trajectories", &trajs, "--out", &d("e_data")])?;

    let report: RunReport = serde_json::from_str(&std::fs::read_to_string(tmp.join("e_eval/report.json")).unwrap())
        .map_err(|e| format!("report.json: {e}"))?;
    let n_traj = std::fs::read_to_string(&trajs).unwrap().lines().count();
    ensure(report.results.len() == n_traj && !report.groups.is_empty(), || {
        format!("report has {} results for {n_traj} trajectories", report.results.len())
    })?;
    ensure(report.overall.count == n_traj, || "overall count".into())?;

    let sft_text = std::fs::read_to_string(tmp.join("e_data/sft.jsonl")).unwrap();
    let mut n_sft = 0;
    for line in sft_text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("sft.jsonl: {e}"))?;
        ensure(has_keys(&v, &["episode_id", "step", "state_text", "feasible", "action"]), || format!("sft record {v}"))?;
        let r: SftRecord = serde_json::from_value(v).map_err(|e| format!("sft.jsonl: {e}"))?;
        ensure(r.feasible.contains(&r.action) && !r.state_text.is_empty(), || format!("sft record {}", r.episode_id))?;
        n_sft += 1;
    }
    let dpo_text = std::fs::read_to_string(tmp.join("e_data/dpo.jsonl")).unwrap();
    let mut n_dpo = 0;
    for line in dpo_text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("dpo.jsonl: {e}"))?;
        ensure(has_keys(&v, &["episode_id", "state_context", "chosen", "rejected"]), || format!("dpo record {v}"))?;
        let r: DpoRecord = serde_json::from_value(v).map_err(|e| format!("dpo.jsonl: {e}"))?;
        let ends = |s: &[ToolName]| s.last() == Some(&ToolName::CandidateRank);
        ensure(ends(&r.chosen) && ends(&r.rejected) && r.chosen != r.rejected, || format!("dpo record {}", r.episode_id))?;
        n_dpo += 1;
    }
    ensure(n_sft > 0 && n_dpo > 0, || format!("{n_sft} sft / {n_dpo} dpo records"))?;
    Ok(format!("{n_traj} trajectories scored; {n_sft} sft and {n_dpo} dpo records valid"))
}

// -------------------------------------------------------------------------

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    type Criterion<'a> = (&'static str, u64, Box<dyn Fn() -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("protocol conformance", 10, Box::new(protocol_conformance)),
        ("metric oracle", 10, Box::new(metric_oracle)),
        ("executor invariants", 60, Box::new(executor_invariants)),
        ("geo anchor", 1, Box::new(geo_anchor)),
        ("k-means oracle", 30, Box::new(kmeans_oracle)),
        ("gradient checks", 30, Box::new(gradient_checks)),
        ("oracle recovery (SFT)", 60, Box::new(oracle_recovery)),
        ("DPO improvement", 120, Box::new(dpo_improvement)),
        ("greedy distribution matching", 10, Box::new(greedy_matching)),
        ("replay determinism", 10, Box::new(move || replay_determinism(t))),
        ("end-to-end CLI", 60, Box::new(move || end_to_end(t))),
    ];
    println!();
    let mut failed = Vec::new();
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > Duration::from_secs(*limit) => {
                Err(format!("{detail}; took {:.2} s, limit {limit} s", elapsed.as_secs_f64()))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{:.2} s]", i + 1, elapsed.as_secs_f64()),
            Err(why) => {
                println!("FAIL {:>2} {name}: {why} [{:.2} s]", i + 1, elapsed.as_secs_f64());
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
