//! Exercises the binary's exit-code contract and file outputs.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> PathBuf {
    let mut path = PathBuf::from(env!("CARGO_BIN_EXE_cpsnet"));
    assert!(path.exists(), "binary at {path:?}");
    path = path.canonicalize().unwrap();
    path
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/default.toml")
}

#[test]
fn validate_accepts_the_shipped_fixture() {
    let out = Command::new(bin())
        .args(["validate"])
        .arg(fixture())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok:"));
}

#[test]
fn validate_rejects_config_errors_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(fixture())
        .unwrap()
        .replace("bandwidth_bps = 1_000_000", "bandwith = 1_000_000");
    std::fs::write(&bad, text).unwrap();
    let out = Command::new(bin()).args(["validate"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short.toml");
    let text = std::fs::read_to_string(fixture())
        .unwrap()
        .replace("duration_us = 100_000_000", "duration_us = 2_000_000");
    std::fs::write(&short, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = Command::new(bin())
        .args(["run"])
        .arg(&short)
        .args(["--seed", "7", "--trace", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("metrics.jsonl").exists());
    assert!(out_dir.join("summary.json").exists());
    assert!(out_dir.join("trace.log").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["schema"], "cpsnet-run-v1");
}

#[test]
fn compare_run_against_itself_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short.toml");
    let text = std::fs::read_to_string(fixture())
        .unwrap()
        .replace("duration_us = 100_000_000", "duration_us = 1_000_000");
    std::fs::write(&short, text).unwrap();
    for name in ["a", "b"] {
        let out = Command::new(bin())
            .args(["run"])
            .arg(&short)
            .args(["--out"])
            .arg(dir.path().join(name))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
    }
    let out = Command::new(bin())
        .args(["compare"])
        .arg(dir.path().join("a/summary.json"))
        .arg(dir.path().join("b/summary.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let deltas: Vec<serde_json::Value> =
        serde_json::from_slice(&out.stdout).expect("delta json");
    assert!(!deltas.is_empty());
    for d in &deltas {
        assert_eq!(d["delta"].as_f64().unwrap(), 0.0, "{d}");
    }
}

#[test]
fn batch_aggregates_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short.toml");
    let text = std::fs::read_to_string(fixture())
        .unwrap()
        .replace("duration_us = 100_000_000", "duration_us = 1_000_000");
    std::fs::write(&short, text).unwrap();
    let out_dir = dir.path().join("batch");
    let out = Command::new(bin())
        .args(["batch"])
        .arg(&short)
        .args(["--seeds", "3", "--jobs", "2", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let agg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("aggregate.json")).unwrap())
            .unwrap();
    assert_eq!(agg["runs"], 3);
    assert_eq!(agg["schema"], "cpsnet-batch-v1");
    for seed in 42..45 {
        assert!(out_dir.join(format!("seed_{seed}/summary.json")).exists());
    }
}
