//! End-to-end runs of the `coarse1d` binary.

use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coarse1d"))
}

const CONFIG: &str = r#"{
  "name": "small",
  "initial": {"kind": "uniform_n", "n": 20},
  "boundary": {"kind": "fixed", "left": 0.0, "right": 1.0},
  "stop": {"t_end": 0.4},
  "snapshots": {"times": [0.0, 0.2]},
  "replicas": 16,
  "master_seed": 11,
  "outputs": {"events": true}
}"#;

#[test]
fn simulate_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, CONFIG).unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = bin()
            .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("COARSE1D_THREADS", if run == "a" { "1" } else { "3" })
            .status()
            .unwrap();
        assert!(status.success());
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["master_seed"], 11);
        assert_eq!(manifest["config"]["name"], "small");
        reports.push(["report.json", "snapshots.csv", "events.jsonl", "histogram_1.csv"].map(|f| fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, CONFIG).unwrap();
    let read = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        bin()
            .args(["simulate", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()])
            .status()
            .unwrap();
        fs::read(out.join("report.json")).unwrap()
    };
    assert_ne!(read("1", "x"), read("2", "y"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, CONFIG.replace("\"replicas\"", "\"replica_count\"")).unwrap();
    let out = bin().args(["simulate", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replica_count"));
}

#[test]
fn reverse_writes_split_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("rev.json");
    fs::write(
        &cfg,
        r#"{"start": {"kind": "mu_star", "target": 4}, "replicas": 3, "master_seed": 5, "events": true}"#,
    )
    .unwrap();
    let out = dir.path().join("rev");
    let status = bin()
        .args(["reverse", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let log = fs::read_to_string(out.join("events.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(line["kind"], "split");
}

#[test]
fn verify_subset_and_chains() {
    let out = bin().args(["verify", "--quick", "--only", "3,6,10"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 3);

    let out = bin().args(["chains", "--variant", "death", "--n", "5", "--replicas", "4"]).output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> =
        String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l["x0"] == 5 && l["jumps"].as_array().unwrap().len() == 5));
    let out = bin().args(["chains", "--variant", "r2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
