use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agentrec::eval::RunReport;
use agentrec::Trajectory;
use serde_json::Value;

fn agentrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agentrec")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = agentrec(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON summary on stdout")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("JSON error on stderr")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).to_str().unwrap().to_string()
}

fn p(dir: &Path, rel: &str) -> String {
    dir.join(rel).to_str().unwrap().to_string()
}

fn make_tasks(dir: &Path, n: usize) -> String {
    ok(&["make-tasks", "--corpus", &fixture("yelp_small"), "--out", &p(dir, "tasks"), "--select", &n.to_string()]);
    p(dir, "tasks/tasks.jsonl")
}

#[test]
fn help_and_usage_errors() {
    let out = agentrec(&["--help"]);
    assert!(out.status.success());
    let help = String::from_utf8_lossy(&out.stdout);
    for cmd in ["ingest", "make-tasks", "run", "mine", "train-sft", "train-dpo", "emit-datasets", "eval", "replay", "oracle"] {
        assert!(help.contains(cmd), "help lacks {cmd}");
    }
    let out = agentrec(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn missing_input_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = agentrec(&["run", "--corpus", &p(dir.path(), "nope"), "--tasks", &p(dir.path(), "nope.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "missing_input");
    assert!(err["message"].as_str().unwrap().contains("nope"));
}

#[test]
fn ingest_summarizes_corpus() {
    let v = ok(&["ingest", "--corpus", &fixture("tiny")]);
    let text = v.to_string();
    assert!(text.contains("amazon"), "{text}");
}

#[test]
fn config_file_drives_a_run_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tasks = make_tasks(d, 10);
    let cfg = serde_json::json!({"corpus": fixture("yelp_small"), "tasks": tasks, "seed": 3});
    std::fs::write(d.join("c.json"), cfg.to_string()).unwrap();

    let run = |out: &str| ok(&["run", "--config", &p(d, "c.json"), "--policy", "greedy", "--out", &p(d, out)]);
    let read = |rel: &str| std::fs::read_to_string(d.join(rel)).unwrap();
    run("a");
    let (first, first_report) = (read("a/trajectories.jsonl"), read("a/report.json"));
    assert_eq!(first.lines().count(), 10);
    for line in first.lines() {
        let t: Trajectory = serde_json::from_str(line).unwrap();
        assert!(t.is_completed());
    }
    run("a");
    assert_eq!(first, read("a/trajectories.jsonl"));
    assert_eq!(first_report, read("a/report.json"));
    let parsed: RunReport = serde_json::from_str(&first_report).unwrap();
    assert_eq!(parsed.results.len(), 10);
    assert!(d.join("a/runlog/config.json").exists());
    assert!(d.join("tasks/config.json").exists());

    // The seed from the file reaches the snapshot; the flag wins over it.
    let snap: Value = serde_json::from_str(&std::fs::read_to_string(d.join("a/runlog/config.json")).unwrap()).unwrap();
    assert_eq!(snap["seed"], 3);
    ok(&["run", "--config", &p(d, "c.json"), "--seed", "4", "--out", &p(d, "c")]);
    let snap: Value = serde_json::from_str(&std::fs::read_to_string(d.join("c/runlog/config.json")).unwrap()).unwrap();
    assert_eq!(snap["seed"], 4);
}

#[test]
fn replay_accepts_an_untouched_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tasks = make_tasks(d, 12);
    ok(&["run", "--corpus", &fixture("yelp_small"), "--tasks", &tasks, "--policy", "random", "--out", &p(d, "run")]);
    let v = ok(&["replay", "--run", &p(d, "run")]);
    assert_eq!(v["replayed"], 12);

    let out = agentrec(&["replay", "--run", &p(d, "tasks")]);
    assert_eq!(stderr_json(&out)["error"], "missing_input");
}

#[test]
fn train_sft_then_dpo_on_synthetic_world() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sft = ok(&["train-sft", "--synthetic", "120", "--out", &p(d, "sft")]);
    let losses = sft["epoch_losses"].as_array().unwrap();
    assert_eq!(losses.len(), 3);
    assert!(losses.last().unwrap().as_f64().unwrap() < sft["initial_loss"].as_f64().unwrap());
    let ckpt = p(d, "sft/policy_sft.json");
    assert!(PathBuf::from(&ckpt).exists());

    let out = agentrec(&["train-dpo", "--synthetic", "120", "--out", &p(d, "x")]);
    assert_eq!(stderr_json(&out)["error"], "missing_input");

    let dpo = ok(&["train-dpo", "--synthetic", "120", "--checkpoint", &ckpt, "--out", &p(d, "dpo")]);
    assert!(dpo["pairs"].as_u64().unwrap() > 0);
    let before = dpo["satisfaction_before"].as_f64().unwrap();
    let after = dpo["satisfaction_after"].as_f64().unwrap();
    assert!(after > before, "satisfaction {before} -> {after}");
    assert!(d.join("dpo/policy_dpo.json").exists());
    assert!(d.join("dpo/dpo_report.json").exists());
}

#[test]
fn oracle_lists_one_plan_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&["oracle", "--synthetic", "30", "--out", &p(dir.path(), "o")]);
    assert_eq!(v["episodes"], 30);
    let text = std::fs::read_to_string(dir.path().join("o/oracle_plans.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 30);
    for line in text.lines() {
        let row: Value = serde_json::from_str(line).unwrap();
        let plan = row["plan"]["actions"].as_array().unwrap();
        assert_eq!(plan.last().unwrap(), "CandidateRank");
    }
}

#[test]
fn mine_writes_clusters_and_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&["mine", "--traces", &fixture("traces.jsonl"), "--out", &p(dir.path(), "m")]);
    assert_eq!(v["domains"].as_array().unwrap().len(), 3);
    for f in ["clusters.json", "tool_mapping.json", "config.json"] {
        assert!(dir.path().join("m").join(f).exists(), "{f}");
    }
}
