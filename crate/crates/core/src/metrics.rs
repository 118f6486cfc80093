//! Per-step metrics records, run summaries, and the paired-run comparison.
//!
//! Records stream to a line-delimited JSON file; the summary is a single
//! JSON document computed from the records plus run-level bookkeeping, so
//! a reader can always recompute the summary from the stream. Everything
//! serializes through ordered maps and fixed struct layouts, which keeps
//! same-seed runs byte-identical.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[serde(deny_unknown_fields)]
pub enum Record {
    /// one plant step: ground-truth state, applied actuation, measurement,
    /// and this step's quadratic cost contribution
    State {
        k: u64,
        t_us: u64,
        x: Vec<f64>,
        u: Vec<f64>,
        y: Vec<f64>,
        cost: f64,
    },
    /// one detector evaluation over a full residual window
    Detector { k: u64, t_us: u64, g: f64, alarm: bool },
    MissedMeasurement { k: u64, t_us: u64, consecutive: u32 },
    Alert {
        t_us: u64,
        alert: String,
        reason: String,
        statistic: f64,
        step: u64,
    },
    Verdict {
        t_us: u64,
        verdict: String,
        flow: String,
        suspicion: u32,
        behavior_deviation: Option<f64>,
        fault_evidence: bool,
    },
    Evidence { t_us: u64, flow: String, evidence: String },
    Transition {
        t_us: u64,
        flow: String,
        from: String,
        to: String,
    },
    AckSent { t_us: u64, flow: String, action: String },
    AckReceived { t_us: u64, flow: String, action: String },
    Delivery {
        t_us: u64,
        packet_id: u64,
        flow: String,
        delay_us: u64,
        sinkholed: bool,
    },
    Drop {
        t_us: u64,
        packet_id: u64,
        flow: String,
        reason: String,
    },
    LinkEvent { t_us: u64, link: String, up: bool },
    RuleInstalled { t_us: u64, switch: String, rule_id: u64 },
    RuleRemoved { t_us: u64, switch: String, rule_id: u64, existed: bool },
    MitigationComplete { t_us: u64, verdict_t_us: u64 },
    Saturated { t_us: u64, k: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Conservation {
    pub injected: u64,
    pub delivered: u64,
    pub sinkholed: u64,
    pub dropped_loss: u64,
    pub dropped_rule: u64,
    pub dropped_failure: u64,
    pub dropped_miss_timeout: u64,
    pub dropped_miss_overflow: u64,
    pub dropped_intercepted: u64,
    pub dropped_no_route: u64,
    pub dropped_queue: u64,
    pub buffered_at_end: u64,
    pub in_transit_at_end: u64,
}

impl Conservation {
    /// Exact balance: every injected packet is accounted for in exactly
    /// one terminal bucket.
    pub fn balanced(&self) -> bool {
        self.injected
            == self.delivered
                + self.sinkholed
                + self.dropped_loss
                + self.dropped_rule
                + self.dropped_failure
                + self.dropped_miss_timeout
                + self.dropped_miss_overflow
                + self.dropped_intercepted
                + self.dropped_no_route
                + self.dropped_queue
                + self.buffered_at_end
                + self.in_transit_at_end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DelayStats {
    pub count: u64,
    pub mean_us: f64,
    pub p95_us: f64,
}

impl DelayStats {
    pub fn from_delays(mut delays: Vec<u64>) -> Self {
        if delays.is_empty() {
            return DelayStats::default();
        }
        delays.sort_unstable();
        let count = delays.len() as u64;
        let mean_us = delays.iter().sum::<u64>() as f64 / count as f64;
        let idx = ((count as f64 * 0.95).ceil() as usize).clamp(1, delays.len()) - 1;
        DelayStats {
            count,
            mean_us,
            p95_us: delays[idx] as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthWindow {
    pub what: String,
    pub start_us: u64,
    pub stop_us: u64,
}

/// Inputs to summary computation that do not live in the record stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub duration_us: u64,
    pub control_period_us: u64,
    pub attacks: Vec<GroundTruthWindow>,
    pub faults: Vec<GroundTruthWindow>,
    pub conservation: Conservation,
    pub final_classes: BTreeMap<String, String>,
    pub flows_without_path: u64,
    pub diverged_at_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub seed: u64,
    pub duration_us: u64,
    pub steps: u64,
    pub ground_truth: String,
    pub run_verdict: String,
    pub detection_latency_steps: Option<u64>,
    pub time_to_mitigate_us: Option<u64>,
    pub false_alarm_rate: f64,
    pub detector_evaluations: u64,
    pub detector_alarms: u64,
    pub alerts: u64,
    pub control_cost: f64,
    pub packets_delivered: u64,
    pub packets_sinkholed: u64,
    pub class_transitions: u64,
    pub final_classes: BTreeMap<String, String>,
    pub delays: BTreeMap<String, DelayStats>,
    pub drops: BTreeMap<String, u64>,
    pub conservation: Conservation,
    pub flows_without_path: u64,
    pub diverged_at_step: Option<u64>,
    pub attacks: Vec<GroundTruthWindow>,
    pub faults: Vec<GroundTruthWindow>,
}

pub const SUMMARY_SCHEMA: &str = "cpsnet-run-v1";

fn verdict_is_attack(v: &str) -> bool {
    v == "attack" || v == "attack-suspected"
}

/// Computes the run summary from the record stream and run-level inputs.
/// This is the only summary writer; the audit re-parses the serialized
/// records and checks this function reproduces the emitted summary.
pub fn compute_summary(records: &[Record], meta: &RunMeta) -> Summary {
    let ground_truth = if !meta.attacks.is_empty() {
        "attack"
    } else if !meta.faults.is_empty() {
        "fault"
    } else {
        "clean"
    }
    .to_string();

    let mut steps = 0u64;
    let mut evaluations = 0u64;
    let mut alarms = 0u64;
    let mut nominal_evaluations = 0u64;
    let mut nominal_alarms = 0u64;
    let mut alerts = 0u64;
    let mut transitions = 0u64;
    let mut delivered = 0u64;
    let mut sinkholed = 0u64;
    let mut first_verdict: Option<(&str, u64)> = None;
    let mut verdict_label = "nominal".to_string();
    let mut mitigation_complete: Option<u64> = None;
    let mut delays_all: Vec<u64> = Vec::new();
    let mut delays_sensor: Vec<u64> = Vec::new();
    let mut delays_tail: Vec<u64> = Vec::new();
    let mut drops: BTreeMap<String, u64> = BTreeMap::new();

    let in_disturbed_window = |t: u64| {
        meta.attacks
            .iter()
            .chain(meta.faults.iter())
            // alarms echo a window for a while after it closes; leave a
            // settling margin of 100 control periods before counting
            // alarms as false again
            .any(|w| t >= w.start_us && t <= w.stop_us + 100 * meta.control_period_us)
    };
    let tail_start = meta.duration_us.saturating_sub(meta.duration_us / 4);

    for rec in records {
        match rec {
            Record::State { k, .. } => steps = steps.max(*k),
            Record::Detector { t_us, alarm, .. } => {
                evaluations += 1;
                if *alarm {
                    alarms += 1;
                }
                if !in_disturbed_window(*t_us) {
                    nominal_evaluations += 1;
                    if *alarm {
                        nominal_alarms += 1;
                    }
                }
            }
            Record::Alert { alert, .. } if alert == "physical-anomaly" => alerts += 1,
            Record::Verdict { t_us, verdict, .. } => {
                if first_verdict.is_none() {
                    first_verdict = Some((verdict.as_str(), *t_us));
                    verdict_label = if verdict_is_attack(verdict) {
                        "attack".to_string()
                    } else {
                        verdict.clone()
                    };
                }
            }
            Record::Transition { .. } => transitions += 1,
            Record::Delivery {
                t_us,
                flow,
                delay_us,
                sinkholed: s,
                ..
            } => {
                if *s {
                    sinkholed += 1;
                } else {
                    delivered += 1;
                }
                delays_all.push(*delay_us);
                if flow.ends_with("/scada") && !*s {
                    delays_sensor.push(*delay_us);
                    if *t_us >= tail_start {
                        delays_tail.push(*delay_us);
                    }
                }
            }
            Record::Drop { reason, .. } => {
                *drops.entry(reason.clone()).or_insert(0) += 1;
            }
            Record::MitigationComplete { t_us, .. } if mitigation_complete.is_none() => {
                mitigation_complete = Some(*t_us);
            }
            _ => {}
        }
    }

    // latency from the first ground-truth window start to the first verdict
    // of the matching kind
    let detection_latency_steps = first_verdict.and_then(|(verdict, t)| {
        let window_start = if !meta.attacks.is_empty() {
            if !verdict_is_attack(verdict) {
                return None;
            }
            meta.attacks.iter().map(|w| w.start_us).min()
        } else if !meta.faults.is_empty() {
            if verdict != "fault" {
                return None;
            }
            meta.faults.iter().map(|w| w.start_us).min()
        } else {
            None
        }?;
        if t < window_start {
            return None;
        }
        Some((t - window_start).div_ceil(meta.control_period_us))
    });
    let time_to_mitigate_us = match (first_verdict, mitigation_complete) {
        (Some((_, vt)), Some(mt)) if mt >= vt => Some(mt - vt),
        _ => None,
    };

    let false_alarm_rate = if nominal_evaluations > 0 {
        nominal_alarms as f64 / nominal_evaluations as f64
    } else {
        0.0
    };

    let mut delays = BTreeMap::new();
    delays.insert("all".to_string(), DelayStats::from_delays(delays_all));
    delays.insert("scada".to_string(), DelayStats::from_delays(delays_sensor));
    delays.insert(
        "scada_tail".to_string(),
        DelayStats::from_delays(delays_tail),
    );

    Summary {
        schema: SUMMARY_SCHEMA.to_string(),
        seed: meta.seed,
        duration_us: meta.duration_us,
        steps,
        ground_truth,
        run_verdict: verdict_label,
        detection_latency_steps,
        time_to_mitigate_us,
        false_alarm_rate,
        detector_evaluations: evaluations,
        detector_alarms: alarms,
        alerts,
        control_cost: records
            .iter()
            .filter_map(|r| match r {
                Record::State { cost, .. } => Some(*cost),
                _ => None,
            })
            .sum(),
        packets_delivered: delivered,
        packets_sinkholed: sinkholed,
        class_transitions: transitions,
        final_classes: meta.final_classes.clone(),
        delays,
        drops,
        conservation: meta.conservation.clone(),
        flows_without_path: meta.flows_without_path,
        diverged_at_step: meta.diverged_at_step,
        attacks: meta.attacks.clone(),
        faults: meta.faults.clone(),
    }
}

pub fn records_to_jsonl(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<Record>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema mismatch: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Delta {
    pub metric: String,
    pub baseline: f64,
    pub treatment: f64,
    pub delta: f64,
    pub percent: Option<f64>,
}

/// Numeric field-by-field comparison of two summary documents of the same
/// schema. Non-numeric leaves must match exactly; numeric leaves produce
/// signed deltas with percentages where the baseline is nonzero.
pub fn compare_summaries(
    baseline: &serde_json::Value,
    treatment: &serde_json::Value,
) -> Result<Vec<Delta>, CompareError> {
    let schema_of = |v: &serde_json::Value| -> Option<String> {
        v.get("schema").and_then(|s| s.as_str()).map(String::from)
    };
    match (schema_of(baseline), schema_of(treatment)) {
        (Some(a), Some(b)) if a == b => {}
        (a, b) => {
            return Err(CompareError::Schema(format!(
                "schema fields differ or are missing: {a:?} vs {b:?}"
            )))
        }
    }
    let mut out = Vec::new();
    diff_value(baseline, treatment, "", &mut out)?;
    Ok(out)
}

fn diff_value(
    a: &serde_json::Value,
    b: &serde_json::Value,
    path: &str,
    out: &mut Vec<Delta>,
) -> Result<(), CompareError> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            // keys present on one side only are data (confusion cells and
            // the like), reported as one-sided deltas rather than schema
            // errors; the schema check proper happens on the tag field
            for (key, va) in ma {
                let child = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match mb.get(key) {
                    Some(vb) => diff_value(va, vb, &child, out)?,
                    None => {
                        if let Some(fa) = va.as_f64() {
                            out.push(Delta {
                                metric: child,
                                baseline: fa,
                                treatment: f64::NAN,
                                delta: f64::NAN,
                                percent: None,
                            });
                        }
                    }
                }
            }
            for (key, vb) in mb {
                if !ma.contains_key(key) {
                    if let Some(fb) = vb.as_f64() {
                        out.push(Delta {
                            metric: format!("{path}.{key}"),
                            baseline: f64::NAN,
                            treatment: fb,
                            delta: f64::NAN,
                            percent: None,
                        });
                    }
                }
            }
            Ok(())
        }
        (Value::Array(xa), Value::Array(xb)) => {
            // ground-truth window lists may legitimately differ between a
            // baseline and a treatment; arrays are compared only when the
            // shapes line up
            if xa.len() == xb.len() {
                for (i, (va, vb)) in xa.iter().zip(xb.iter()).enumerate() {
                    diff_value(va, vb, &format!("{path}[{i}]"), out)?;
                }
            }
            Ok(())
        }
        (Value::Number(na), Value::Number(nb)) => {
            let (fa, fb) = (na.as_f64().unwrap_or(0.0), nb.as_f64().unwrap_or(0.0));
            let delta = fb - fa;
            out.push(Delta {
                metric: path.to_string(),
                baseline: fa,
                treatment: fb,
                delta,
                percent: if fa != 0.0 { Some(100.0 * delta / fa) } else { None },
            });
            Ok(())
        }
        (Value::Null, Value::Null) => Ok(()),
        // Option<number>: treat null vs number as a non-comparable delta
        (Value::Null, Value::Number(nb)) => {
            out.push(Delta {
                metric: path.to_string(),
                baseline: f64::NAN,
                treatment: nb.as_f64().unwrap_or(0.0),
                delta: f64::NAN,
                percent: None,
            });
            Ok(())
        }
        (Value::Number(na), Value::Null) => {
            out.push(Delta {
                metric: path.to_string(),
                baseline: na.as_f64().unwrap_or(0.0),
                treatment: f64::NAN,
                delta: f64::NAN,
                percent: None,
            });
            Ok(())
        }
        (Value::String(_), Value::String(_)) | (Value::Bool(_), Value::Bool(_)) => Ok(()),
        _ => Err(CompareError::Schema(format!("type mismatch at `{path}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> RunMeta {
        RunMeta {
            seed: 1,
            duration_us: 1_000_000,
            control_period_us: 10_000,
            attacks: vec![],
            faults: vec![],
            conservation: Conservation {
                injected: 2,
                delivered: 2,
                ..Default::default()
            },
            final_classes: BTreeMap::new(),
            flows_without_path: 0,
            diverged_at_step: None,
        }
    }

    #[test]
    fn summary_counts_records() {
        let records = vec![
            Record::State {
                k: 1,
                t_us: 10_000,
                x: vec![1.0],
                u: vec![0.5],
                y: vec![1.0],
                cost: 1.25,
            },
            Record::Detector {
                k: 10,
                t_us: 100_000,
                g: 5.0,
                alarm: false,
            },
            Record::Detector {
                k: 20,
                t_us: 200_000,
                g: 25.0,
                alarm: true,
            },
            Record::Delivery {
                t_us: 10_500,
                packet_id: 1,
                flow: "h_plant->h_ctrl/scada".into(),
                delay_us: 2400,
                sinkholed: false,
            },
            Record::Delivery {
                t_us: 990_000,
                packet_id: 2,
                flow: "h_plant->h_ctrl/scada".into(),
                delay_us: 2600,
                sinkholed: true,
            },
        ];
        let s = compute_summary(&records, &meta());
        assert_eq!(s.detector_evaluations, 2);
        assert_eq!(s.detector_alarms, 1);
        assert_eq!(s.false_alarm_rate, 0.5);
        assert_eq!(s.packets_delivered, 1);
        assert_eq!(s.packets_sinkholed, 1);
        assert_eq!(s.ground_truth, "clean");
        assert_eq!(s.run_verdict, "nominal");
        assert!((s.control_cost - 1.25).abs() < 1e-12);
        assert!(s.conservation.balanced());
    }

    #[test]
    fn detection_latency_measured_in_steps() {
        let mut m = meta();
        m.attacks.push(GroundTruthWindow {
            what: "replay".into(),
            start_us: 100_000,
            stop_us: 500_000,
        });
        let records = vec![
            Record::Verdict {
                t_us: 350_000,
                verdict: "attack".into(),
                flow: "f".into(),
                suspicion: 1,
                behavior_deviation: Some(0.5),
                fault_evidence: false,
            },
            Record::MitigationComplete {
                t_us: 360_000,
                verdict_t_us: 350_000,
            },
        ];
        let s = compute_summary(&records, &m);
        assert_eq!(s.ground_truth, "attack");
        assert_eq!(s.run_verdict, "attack");
        assert_eq!(s.detection_latency_steps, Some(25));
        assert_eq!(s.time_to_mitigate_us, Some(10_000));
    }

    #[test]
    fn records_round_trip_jsonl() {
        let records = vec![
            Record::Alert {
                t_us: 5,
                alert: "physical-anomaly".into(),
                reason: "residual-threshold".into(),
                statistic: 33.2,
                step: 12,
            },
            Record::LinkEvent {
                t_us: 9,
                link: "s2-s3".into(),
                up: false,
            },
        ];
        let text = records_to_jsonl(&records);
        let back = records_from_jsonl(&text).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn self_comparison_is_all_zero() {
        let s = compute_summary(&[], &meta());
        let v = serde_json::to_value(&s).unwrap();
        let deltas = compare_summaries(&v, &v).unwrap();
        assert!(!deltas.is_empty());
        assert!(deltas.iter().all(|d| d.delta == 0.0));
    }

    #[test]
    fn schema_mismatch_is_an_error() {
        let s = compute_summary(&[], &meta());
        let a = serde_json::to_value(&s).unwrap();
        let mut b = a.clone();
        b["schema"] = serde_json::Value::String("other".into());
        assert!(matches!(
            compare_summaries(&a, &b),
            Err(CompareError::Schema(_))
        ));
    }

    #[test]
    fn numeric_delta_with_percentage() {
        let s1 = compute_summary(&[], &meta());
        let mut m2 = meta();
        m2.conservation.injected = 4;
        m2.conservation.delivered = 4;
        let s2 = compute_summary(&[], &m2);
        let a = serde_json::to_value(&s1).unwrap();
        let b = serde_json::to_value(&s2).unwrap();
        let deltas = compare_summaries(&a, &b).unwrap();
        let injected = deltas
            .iter()
            .find(|d| d.metric == "conservation.injected")
            .unwrap();
        assert_eq!(injected.delta, 2.0);
        assert_eq!(injected.percent, Some(100.0));
    }
}
