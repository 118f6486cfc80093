//! Scenario runner: executes a validated config, audits the run's
//! invariants, writes metrics artifacts, and aggregates seeded batches.
//!
//! Exit-code contract (kept stable for scripts): 0 clean, 2 config error,
//! 3 invariant-audit failure, 4 plant divergence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::metrics::{
    compare_summaries, compute_summary, records_from_jsonl, records_to_jsonl, CompareError, Delta,
    Record, RunMeta, Summary,
};
use crate::scenario::{ConfigError, ScenarioConfig};
use crate::sim::EventLoop;
use crate::stats::wilson_interval;
use crate::world::{Msg, World, WorldError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Compare(#[from] CompareError),
}

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_AUDIT: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub trace: bool,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub summary: Summary,
    pub records: Vec<Record>,
    pub meta: RunMeta,
    pub audit_failures: Vec<String>,
    pub events_processed: u64,
}

impl RunArtifacts {
    pub fn exit_code(&self) -> i32 {
        if self.meta.diverged_at_step.is_some() {
            EXIT_DIVERGED
        } else if !self.audit_failures.is_empty() {
            EXIT_AUDIT
        } else {
            EXIT_CLEAN
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Runs one scenario end to end: simulate, audit, and (optionally) write
/// `metrics.jsonl`, `summary.json`, and `trace.log` into the output
/// directory.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunArtifacts, HarnessError> {
    let seed = opts.seed_override.unwrap_or(cfg.seed());
    let mut el: EventLoop<Msg> = EventLoop::new();
    if let (true, Some(dir)) = (opts.trace, opts.out_dir.as_ref()) {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let file = fs::File::create(dir.join("trace.log")).map_err(|source| HarnessError::Io {
            path: dir.join("trace.log").display().to_string(),
            source,
        })?;
        el.set_trace(Box::new(BufWriter::new(file)));
    }

    let world = World::new(cfg.clone(), seed, &mut el)?;
    let output = world.run(&mut el);
    if let Some(mut sink) = el.take_trace() {
        let _ = sink.flush();
    }

    let summary = compute_summary(&output.records, &output.meta);
    let mut audit_failures = output.audit_failures.clone();
    audit_failures.extend(audit_conservation(&output.meta));
    audit_failures.extend(audit_class_transitions(&output.records));
    audit_failures.extend(audit_ack_pairing(&output.records));
    audit_failures.extend(audit_mitigation_completeness(
        &output.records,
        cfg.raw.pnctrl.rule_propagation_bound_us,
    ));
    audit_failures.extend(audit_summary_recompute(
        &output.records,
        &output.meta,
        &summary,
    ));

    if let Some(dir) = opts.out_dir.as_ref() {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        write_file(&dir.join("metrics.jsonl"), records_to_jsonl(&output.records).as_bytes())?;
        let mut summary_json =
            serde_json::to_string_pretty(&summary).expect("summary serializes");
        summary_json.push('\n');
        write_file(&dir.join("summary.json"), summary_json.as_bytes())?;
    }

    Ok(RunArtifacts {
        summary,
        records: output.records,
        meta: output.meta,
        audit_failures,
        events_processed: output.events_processed,
    })
}

fn audit_conservation(meta: &RunMeta) -> Vec<String> {
    if meta.conservation.balanced() {
        Vec::new()
    } else {
        vec![format!(
            "packet conservation violated: {:?}",
            meta.conservation
        )]
    }
}

fn class_rank(name: &str) -> Option<u8> {
    match name {
        "legitimate" => Some(0),
        "suspicious" => Some(1),
        "malicious" => Some(2),
        _ => None,
    }
}

/// Classes only walk up one step at a time, and only fall back to
/// legitimate after the supervisor cleared its alert.
fn audit_class_transitions(records: &[Record]) -> Vec<String> {
    let mut failures = Vec::new();
    let mut class_of: BTreeMap<&str, &str> = BTreeMap::new();
    let mut cleared_before = false;
    for rec in records {
        match rec {
            Record::Alert { alert, .. } if alert == "cleared" => cleared_before = true,
            Record::Transition { flow, from, to, t_us } => {
                let current = class_of.get(flow.as_str()).copied().unwrap_or("legitimate");
                if current != from {
                    failures.push(format!(
                        "flow {flow} transition at {t_us} claims from={from}, actual {current}"
                    ));
                }
                let (Some(rf), Some(rt)) = (class_rank(from), class_rank(to)) else {
                    failures.push(format!("flow {flow}: unknown class in {from}->{to}"));
                    continue;
                };
                if rt == rf + 1 {
                    // single-step escalation
                } else if rt == 0 && rf > 0 {
                    if !cleared_before {
                        failures.push(format!(
                            "flow {flow} de-escalated at {t_us} without a cleared alert"
                        ));
                    }
                } else {
                    failures.push(format!(
                        "flow {flow} skipped the escalation order: {from}->{to} at {t_us}"
                    ));
                }
                class_of.insert(flow.as_str(), to.as_str());
            }
            _ => {}
        }
    }
    failures
}

/// Every class transition pairs with exactly one acknowledgment, and the
/// supervisor receives acknowledgments in the order they were sent (the
/// unreceived tail may still be in flight at the end of the run).
fn audit_ack_pairing(records: &[Record]) -> Vec<String> {
    let mut failures = Vec::new();
    let mut sent = Vec::new();
    let mut received = Vec::new();
    let mut transitions = 0usize;
    let mut fault_verdicts = 0usize;
    for rec in records {
        match rec {
            Record::AckSent { flow, action, .. } => sent.push((flow.clone(), action.clone())),
            Record::AckReceived { flow, action, .. } => {
                received.push((flow.clone(), action.clone()))
            }
            Record::Transition { .. } => transitions += 1,
            Record::Verdict { verdict, .. } if verdict == "fault" => fault_verdicts += 1,
            _ => {}
        }
    }
    if sent.len() != transitions + fault_verdicts {
        failures.push(format!(
            "ack count {} does not match transitions {} + fault verdicts {}",
            sent.len(),
            transitions,
            fault_verdicts
        ));
    }
    if received.len() > sent.len() || received[..] != sent[..received.len()] {
        failures.push("acknowledgments received out of order".to_string());
    }
    failures
}

/// After a flow turns malicious, nothing of it may reach the original
/// destination once the rule-propagation bound has elapsed.
pub fn audit_mitigation_completeness(records: &[Record], bound_us: u64) -> Vec<String> {
    let mut failures = Vec::new();
    let mut malicious_at: BTreeMap<&str, u64> = BTreeMap::new();
    for rec in records {
        match rec {
            Record::Transition { flow, to, t_us, .. } if to == "malicious" => {
                malicious_at.entry(flow.as_str()).or_insert(*t_us);
            }
            Record::Delivery {
                t_us,
                flow,
                sinkholed,
                packet_id,
                ..
            } if !sinkholed => {
                if let Some(t0) = malicious_at.get(flow.as_str()) {
                    if *t_us > t0 + bound_us {
                        failures.push(format!(
                            "packet {packet_id} of malicious flow {flow} reached its destination at {t_us} (cutoff {})",
                            t0 + bound_us
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    failures
}

/// The emitted summary must be reproducible from the serialized records.
fn audit_summary_recompute(records: &[Record], meta: &RunMeta, summary: &Summary) -> Vec<String> {
    let text = records_to_jsonl(records);
    match records_from_jsonl(&text) {
        Ok(parsed) => {
            let recomputed = compute_summary(&parsed, meta);
            if &recomputed != summary {
                vec!["summary does not match recomputation from records".to_string()]
            } else {
                Vec::new()
            }
        }
        Err(e) => vec![format!("records do not round-trip: {e}")],
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PerSeed {
    pub seed: u64,
    pub exit_code: i32,
    pub run_verdict: String,
    pub detection_latency_steps: Option<u64>,
    pub time_to_mitigate_us: Option<u64>,
    pub false_alarm_rate: f64,
    pub control_cost: f64,
    pub class_transitions: u64,
    pub scada_tail_mean_delay_us: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchSummary {
    pub schema: String,
    pub base_seed: u64,
    pub runs: u64,
    pub ground_truth: String,
    pub attack_verdict_runs: u64,
    pub fault_verdict_runs: u64,
    pub nominal_runs: u64,
    pub detection_rate: f64,
    pub detection_rate_ci95: (f64, f64),
    pub mean_false_alarm_rate: f64,
    pub mean_control_cost: f64,
    pub confusion: BTreeMap<String, u64>,
    pub per_seed: Vec<PerSeed>,
}

pub const BATCH_SCHEMA: &str = "cpsnet-batch-v1";

/// Runs `count` seeds (base, base+1, ...) of one config, optionally in
/// parallel, and aggregates verdict rates with a 95% confidence interval.
/// Instances are fully independent; outputs merge after completion in seed
/// order, so the aggregate is identical however many jobs ran.
pub fn run_batch(
    cfg: &ScenarioConfig,
    count: u64,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<BatchSummary, HarnessError> {
    let base = cfg.seed();
    let seeds: Vec<u64> = (0..count).map(|i| base + i).collect();
    let jobs = jobs.clamp(1, seeds.len().max(1));

    let results: Vec<(u64, Result<RunArtifacts, String>)> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in seeds.chunks(seeds.len().div_ceil(jobs)) {
            let chunk: Vec<u64> = chunk.to_vec();
            let cfg = cfg.clone();
            let out_dir = out_dir.map(Path::to_path_buf);
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                for seed in chunk {
                    let opts = RunOptions {
                        seed_override: Some(seed),
                        out_dir: out_dir.as_ref().map(|d| d.join(format!("seed_{seed}"))),
                        trace: false,
                    };
                    out.push((seed, run_scenario(&cfg, &opts).map_err(|e| e.to_string())));
                }
                out
            }));
        }
        let mut all = Vec::new();
        for h in handles {
            all.extend(h.join().expect("batch worker panicked"));
        }
        all
    });

    let mut ordered: Vec<(u64, RunArtifacts)> = Vec::new();
    for (seed, result) in results {
        match result {
            Ok(art) => ordered.push((seed, art)),
            Err(e) => {
                return Err(HarnessError::Io {
                    path: format!("seed {seed}"),
                    source: std::io::Error::other(e),
                })
            }
        }
    }
    ordered.sort_by_key(|(seed, _)| *seed);

    let mut per_seed = Vec::new();
    let mut attack_runs = 0u64;
    let mut fault_runs = 0u64;
    let mut nominal_runs = 0u64;
    let mut confusion: BTreeMap<String, u64> = BTreeMap::new();
    let mut fa_sum = 0.0;
    let mut cost_sum = 0.0;
    let mut ground_truth = String::from("clean");
    for (seed, art) in &ordered {
        let s = &art.summary;
        ground_truth = s.ground_truth.clone();
        match s.run_verdict.as_str() {
            "attack" => attack_runs += 1,
            "fault" => fault_runs += 1,
            _ => nominal_runs += 1,
        }
        *confusion
            .entry(format!("{}->{}", s.ground_truth, s.run_verdict))
            .or_insert(0) += 1;
        fa_sum += s.false_alarm_rate;
        cost_sum += s.control_cost;
        per_seed.push(PerSeed {
            seed: *seed,
            exit_code: art.exit_code(),
            run_verdict: s.run_verdict.clone(),
            detection_latency_steps: s.detection_latency_steps,
            time_to_mitigate_us: s.time_to_mitigate_us,
            false_alarm_rate: s.false_alarm_rate,
            control_cost: s.control_cost,
            class_transitions: s.class_transitions,
            scada_tail_mean_delay_us: s
                .delays
                .get("scada_tail")
                .map(|d| d.mean_us)
                .unwrap_or(0.0),
        });
    }
    let runs = ordered.len() as u64;
    let detection_rate = if runs > 0 {
        attack_runs as f64 / runs as f64
    } else {
        0.0
    };
    let batch = BatchSummary {
        schema: BATCH_SCHEMA.to_string(),
        base_seed: base,
        runs,
        ground_truth,
        attack_verdict_runs: attack_runs,
        fault_verdict_runs: fault_runs,
        nominal_runs,
        detection_rate,
        detection_rate_ci95: wilson_interval(attack_runs, runs, 1.96),
        mean_false_alarm_rate: if runs > 0 { fa_sum / runs as f64 } else { 0.0 },
        mean_control_cost: if runs > 0 { cost_sum / runs as f64 } else { 0.0 },
        confusion,
        per_seed,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut text = serde_json::to_string_pretty(&batch).expect("batch serializes");
        text.push('\n');
        write_file(&dir.join("aggregate.json"), text.as_bytes())?;
    }
    Ok(batch)
}

/// Field-by-field numeric comparison of two summary (or aggregate) files.
pub fn compare_files(baseline: &Path, treatment: &Path) -> Result<Vec<Delta>, HarnessError> {
    let read = |p: &Path| -> Result<serde_json::Value, HarnessError> {
        let text = fs::read_to_string(p).map_err(|source| HarnessError::Io {
            path: p.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text).map_err(CompareError::Json)?)
    };
    Ok(compare_summaries(&read(baseline)?, &read(treatment)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ack_pairing_detects_reordering() {
        let records = vec![
            Record::Transition {
                t_us: 1,
                flow: "f".into(),
                from: "legitimate".into(),
                to: "suspicious".into(),
            },
            Record::Transition {
                t_us: 2,
                flow: "f".into(),
                from: "suspicious".into(),
                to: "malicious".into(),
            },
            Record::AckSent { t_us: 1, flow: "f".into(), action: "rerouted-quarantine".into() },
            Record::AckSent { t_us: 2, flow: "f".into(), action: "sinkholed".into() },
            Record::AckReceived { t_us: 3, flow: "f".into(), action: "sinkholed".into() },
        ];
        let failures = audit_ack_pairing(&records);
        assert_eq!(failures.len(), 1, "{failures:?}");
    }

    #[test]
    fn class_audit_catches_skipped_step() {
        let records = vec![Record::Transition {
            t_us: 1,
            flow: "f".into(),
            from: "legitimate".into(),
            to: "malicious".into(),
        }];
        let failures = audit_class_transitions(&records);
        assert_eq!(failures.len(), 1);
    }

    #[test]
    fn class_audit_requires_cleared_before_deescalation() {
        let records = vec![
            Record::Transition {
                t_us: 1,
                flow: "f".into(),
                from: "legitimate".into(),
                to: "suspicious".into(),
            },
            Record::Transition {
                t_us: 2,
                flow: "f".into(),
                from: "suspicious".into(),
                to: "legitimate".into(),
            },
        ];
        assert_eq!(audit_class_transitions(&records).len(), 1);

        let with_clear = vec![
            Record::Transition {
                t_us: 1,
                flow: "f".into(),
                from: "legitimate".into(),
                to: "suspicious".into(),
            },
            Record::Alert {
                t_us: 2,
                alert: "cleared".into(),
                reason: "residual-threshold".into(),
                statistic: 1.0,
                step: 5,
            },
            Record::Transition {
                t_us: 3,
                flow: "f".into(),
                from: "suspicious".into(),
                to: "legitimate".into(),
            },
        ];
        assert!(audit_class_transitions(&with_clear).is_empty());
    }

    #[test]
    fn mitigation_audit_flags_late_delivery() {
        let records = vec![
            Record::Transition {
                t_us: 100,
                flow: "f".into(),
                from: "suspicious".into(),
                to: "malicious".into(),
            },
            Record::Delivery {
                t_us: 100_200,
                packet_id: 9,
                flow: "f".into(),
                delay_us: 10,
                sinkholed: false,
            },
        ];
        let failures = audit_mitigation_completeness(&records, 10_000);
        assert_eq!(failures.len(), 1);
        // a sinkholed delivery after the bound is fine
        let ok = vec![
            records[0].clone(),
            Record::Delivery {
                t_us: 100_200,
                packet_id: 9,
                flow: "f".into(),
                delay_us: 10,
                sinkholed: true,
            },
        ];
        assert!(audit_mitigation_completeness(&ok, 10_000).is_empty());
    }
}
