//! Behavior-clone a linear router on oracle plans in a three-archetype
//! synthetic world, knock it off balance with weight noise, then repair it
//! with preference optimization on its own sampled rollouts.
//!
//! ```text
//! cargo run --release --example train_routing -- [sft_epochs] [dpo_epochs] [dpo_lr] [sigma] [noise_seed]
//! ```

use std::collections::BTreeMap;

use agentrec::environment::{make_synthetic_world, SyntheticSuite, SyntheticWorldData};
use agentrec::executor::run_batch;
use agentrec::planner::{
    build_preference_pairs, dpo_train, oracle_trajectories, plan_match_rate, sample_rollouts, sft_train, step_samples,
    DpoConfig, LinearPolicy, SftConfig, TrainConfig,
};
use agentrec::toolkit::{register_tools, ToolRegistry};
use agentrec::{ExecConfig, Trajectory};

fn greedy_runs(p: &LinearPolicy, data: &SyntheticWorldData, reg: &ToolRegistry, exec: &ExecConfig) -> Vec<Trajectory> {
    run_batch(&data.episodes, &data.corpus, p, reg, &data.backend, exec, 4).expect("synthetic batch")
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn arg<T: std::str::FromStr>(args: &[String], i: usize, default: T) -> T {
    args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let sft_epochs = arg(&args, 0, 10usize);
    let dpo_epochs = arg(&args, 1, 1usize);
    let dpo_lr = arg(&args, 2, 0.1f64);
    let sigma = arg(&args, 3, 0.5f64);
    let noise_seed = arg(&args, 4, 11u64);

    let suite = SyntheticSuite::three_archetypes();
    let train = make_synthetic_world(&suite, 300, 1)?;
    let held_out = make_synthetic_world(&suite, 300, 2)?;
    let reg = register_tools(train.corpus.domain());
    let exec = ExecConfig::default();
    let defaults = TrainConfig::default();

    let oracle = oracle_trajectories(&train, &reg, &exec)?;
    let sft_cfg = SftConfig {
        epochs: sft_epochs,
        ..SftConfig::default()
    };
    let (sft, report) = sft_train(&LinearPolicy::zeros(), &step_samples(&oracle), &sft_cfg, 0)?;
    println!("sft loss {:.4} -> {:.4}", report.initial_loss, report.epoch_losses.last().unwrap_or(&f64::NAN));

    let held_oracle = oracle_trajectories(&held_out, &reg, &exec)?;
    let sft_runs = greedy_runs(&sft, &held_out, &reg, &exec);
    println!("sft held-out plan match {:.3}", plan_match_rate(&sft_runs, &held_oracle));

    let noisy = sft.perturbed(sigma, noise_seed);
    let rollouts = sample_rollouts(
        &noisy,
        defaults.sample_temperature,
        defaults.samples_per_episode,
        &train.episodes,
        &train.corpus,
        &reg,
        &train.backend,
        &exec,
        4,
    )?;
    let pairs = build_preference_pairs(&rollouts, exec.lambda);
    let dpo_cfg = DpoConfig {
        epochs: dpo_epochs,
        lr: dpo_lr,
        ..DpoConfig::default()
    };
    let (dpo, dr) = dpo_train(&noisy, &sft, &pairs, &dpo_cfg, 0)?;
    println!(
        "dpo on {} pairs: loss {:.4} -> {:.4}, satisfaction {:.3} -> {:.3}",
        pairs.len(),
        dr.initial_loss,
        dr.epoch_losses.last().unwrap_or(&f64::NAN),
        dr.satisfaction_before,
        dr.satisfaction_after
    );

    for (name, p) in [("sft", &sft), ("perturbed", &noisy), ("dpo", &dpo)] {
        let runs = greedy_runs(p, &held_out, &reg, &exec);
        println!(
            "{name:>9}: held-out reward {:.4}, plan length {:.2}",
            mean(runs.iter().map(|t| t.reward)),
            mean(runs.iter().map(|t| t.steps.len() as f64))
        );
        let mut plans: BTreeMap<(&str, String), usize> = BTreeMap::new();
        for (i, t) in runs.iter().enumerate() {
            let archetype = suite.archetypes[held_out.archetype_of[i]].name.as_str();
            let names: Vec<&str> = t.actions().iter().map(|a| a.as_str()).collect();
            *plans.entry((archetype, names.join(" > "))).or_default() += 1;
        }
        for ((archetype, plan), n) in plans {
            println!("           {archetype:<7} {n:>4}x  {plan}");
        }
    }
    Ok(())
}
