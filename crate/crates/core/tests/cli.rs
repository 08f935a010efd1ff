use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flowrefine::harness::{ExperimentConfig, ExperimentReport};
use flowrefine::TaskSpec;

fn flowrefine(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowrefine"))
        .args(args)
        .current_dir(dir)
        .env_remove("FLOWREFINE_JOBS")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, num_samples: usize) {
    let cfg = ExperimentConfig {
        num_samples,
        task: TaskSpec {
            grid_h: 16,
            grid_w: 16,
            ..TaskSpec::default()
        },
        ..ExperimentConfig::default()
    };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

fn gen(dir: &Path) {
    let out = flowrefine(dir, &["gen", "--config", "config.json", "--out", "ds.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_is_reproducible_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path(), 4);
    gen(dir.path());
    let first = fs::read(dir.path().join("ds.json")).unwrap();
    gen(dir.path());
    assert_eq!(fs::read(dir.path().join("ds.json")).unwrap(), first);

    let out = flowrefine(dir.path(), &["gen", "--config", "config.json", "--out", "s.json", "--seed", "100"]);
    assert!(out.status.success());
    let ds: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("s.json")).unwrap()).unwrap();
    let seeds: Vec<u64> = ds["samples"].as_array().unwrap().iter().map(|s| s["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![100, 101, 102, 103]);
}

#[test]
fn run_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path(), 6);
    gen(dir.path());
    let out = flowrefine(
        dir.path(),
        &["run", "--config", "config.json", "--dataset", "ds.json", "--out", "r.json", "--jobs", "2"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = ExperimentReport::load(&dir.path().join("r.json")).unwrap();
    assert_eq!(report.per_sample.len(), 6);
    assert!(report.consistency_gap().unwrap() <= 1e-12);
    assert!(report.aggregate.oracle_miou >= report.aggregate.baseline_miou);

    let out = flowrefine(dir.path(), &["stats", "--report", "r.json"]);
    assert!(out.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["oracle"]["mean"].as_f64().unwrap(), report.aggregate.oracle_chosen_t.mean);
}

#[test]
fn jobs_env_fallback_matches_flag() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path(), 5);
    gen(dir.path());
    let flag = flowrefine(
        dir.path(),
        &["run", "--config", "config.json", "--dataset", "ds.json", "--out", "a.json", "--jobs", "3"],
    );
    assert!(flag.status.success());
    let env = Command::new(env!("CARGO_BIN_EXE_flowrefine"))
        .args(["run", "--config", "config.json", "--dataset", "ds.json", "--out", "b.json"])
        .current_dir(dir.path())
        .env("FLOWREFINE_JOBS", "1")
        .output()
        .unwrap();
    assert!(env.status.success());
    assert_eq!(fs::read(dir.path().join("a.json")).unwrap(), fs::read(dir.path().join("b.json")).unwrap());

    let bad = Command::new(env!("CARGO_BIN_EXE_flowrefine"))
        .args(["run", "--config", "config.json", "--dataset", "ds.json", "--out", "c.json"])
        .current_dir(dir.path())
        .env("FLOWREFINE_JOBS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn sweep_writes_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path(), 3);
    gen(dir.path());
    let out = flowrefine(
        dir.path(),
        &[
            "sweep", "--config", "config.json", "--dataset", "ds.json", "--out", "s.csv", "--etas", "0.01,0.001",
            "--gammas", "0.1", "--iterations", "2,3",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("eta,gamma,T,t,mean_iou,n_samples,n_truncated"));
    assert_eq!(lines.count(), 2 * (3 + 4));
}

#[test]
fn verify_selector_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowrefine(dir.path(), &["verify", "--suite", "decay", "--out", "v.json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("v.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    let checks = v["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["family"] == "decay"));

    let out = flowrefine(dir.path(), &["verify", "--suite", "gradient"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = flowrefine(dir.path(), &["run", "--dataset", "nope.json", "--out", "r.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));

    fs::write(dir.path().join("zero.json"), r#"{"num_samples": 0}"#).unwrap();
    let zero = flowrefine(dir.path(), &["gen", "--config", "zero.json", "--out", "ds.json"]);
    assert_eq!(zero.status.code(), Some(1));

    fs::write(dir.path().join("typo.json"), r#"{"flow": {"etta": 0.1}}"#).unwrap();
    let typo = flowrefine(dir.path(), &["gen", "--config", "typo.json", "--out", "ds.json"]);
    assert_eq!(typo.status.code(), Some(2));

    let suite = flowrefine(dir.path(), &["verify", "--suite", "bogus"]);
    assert_eq!(suite.status.code(), Some(2));
}
