//! End-to-end sanity runs of the shipped fixture.

use std::path::Path;

use cpsnet_core::harness::{run_scenario, RunOptions};
use cpsnet_core::metrics::Record;
use cpsnet_core::scenario::ScenarioConfig;

fn with_duration(cfg_text: &str, duration_us: u64) -> ScenarioConfig {
    let text = cfg_text.replace(
        "duration_us = 100_000_000",
        &format!("duration_us = {duration_us}"),
    );
    ScenarioConfig::from_toml_str(&text).expect("edited fixture loads")
}

fn fixture_text() -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/default.toml");
    std::fs::read_to_string(path).expect("fixture readable")
}

#[test]
fn clean_run_closes_the_loop() {
    let cfg = with_duration(&fixture_text(), 10_000_000); // 1000 steps
    let art = run_scenario(&cfg, &RunOptions::default()).expect("run succeeds");
    assert_eq!(art.exit_code(), 0, "audits: {:?}", art.audit_failures);

    let steps = art.summary.steps;
    assert_eq!(steps, 1000);
    // sensor and actuation frames both delivered across the fabric
    assert!(
        art.summary.packets_delivered > 1900,
        "delivered = {}",
        art.summary.packets_delivered
    );
    assert_eq!(art.summary.packets_sinkholed, 0);
    assert!(art.summary.conservation.balanced());
    // the regulator keeps the plant near the origin: per-step cost settles
    let late_cost: f64 = art
        .records
        .iter()
        .filter_map(|r| match r {
            Record::State { k, cost, .. } if *k > 500 => Some(*cost),
            _ => None,
        })
        .sum::<f64>()
        / 500.0;
    assert!(late_cost < 0.5, "late mean step cost = {late_cost}");
    // detector ran and the supervisor stayed quiet enough to leave classes
    // alone under this seed
    assert!(art.summary.detector_evaluations >= 90);
    assert_eq!(art.summary.class_transitions, 0);
    assert_eq!(art.summary.run_verdict, "nominal");
}

#[test]
fn same_seed_runs_are_identical() {
    let cfg = with_duration(&fixture_text(), 5_000_000);
    let a = run_scenario(&cfg, &RunOptions::default()).unwrap();
    let b = run_scenario(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.summary, b.summary);
}

#[test]
fn different_seeds_differ() {
    let cfg = with_duration(&fixture_text(), 5_000_000);
    let a = run_scenario(&cfg, &RunOptions::default()).unwrap();
    let b = run_scenario(
        &cfg,
        &RunOptions {
            seed_override: Some(43),
            ..Default::default()
        },
    )
    .unwrap();
    assert_ne!(a.records, b.records);
}

#[test]
fn divergence_aborts_with_exit_4() {
    // a divergence bound below the initial transient trips immediately
    let text = fixture_text()
        .replace("duration_us = 100_000_000", "duration_us = 5_000_000")
        .replace("x0 = [1.0]", "x0 = [1.0]\ndivergence_bound = 0.5");
    let cfg = ScenarioConfig::from_toml_str(&text).unwrap();
    let art = run_scenario(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(art.exit_code(), 4);
    assert_eq!(art.meta.diverged_at_step, Some(1));
    assert_eq!(art.summary.diverged_at_step, Some(1));
}

#[test]
fn double_integrator_fixture_runs_clean() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/double_integrator.toml");
    let text = std::fs::read_to_string(path)
        .unwrap()
        .replace("duration_us = 50_000_000", "duration_us = 10_000_000");
    let cfg = ScenarioConfig::from_toml_str(&text).unwrap();
    let art = run_scenario(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(art.exit_code(), 0, "audits: {:?}", art.audit_failures);
    assert_eq!(art.summary.class_transitions, 0);
    // detector threshold resolves to the chi-square table for 2 x 10
    // degrees of freedom
    assert!((cfg.tau - 31.410).abs() < 1e-2, "tau = {}", cfg.tau);
    // both measured states regulated toward the origin
    let last_state = art
        .records
        .iter()
        .rev()
        .find_map(|r| match r {
            Record::State { x, .. } => Some(x.clone()),
            _ => None,
        })
        .unwrap();
    assert!(last_state.iter().all(|v| v.abs() < 1.0), "{last_state:?}");
}
