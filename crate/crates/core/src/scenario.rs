//! Scenario configuration: a strict TOML schema describing one seeded
//! experiment. Unknown keys are rejected so config typos fail loudly at
//! load time, and every cross-reference (node names, matrix dimensions,
//! stabilizability) is validated before a simulation starts.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::adversary::{AttackKind, AttackSpec};
use crate::control::{detector_threshold, lqr_gain, ControlError};
use crate::net::{LinkDef, NodeDef, NodeIdx, NodeKind, Topology, TopologyError};
use crate::plant::{PlantError, StateSpaceModel};
use crate::scada::RegisterCodec;
use crate::sim::SimTime;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config key `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("plant: {0}")]
    Plant(#[from] PlantError),
    #[error("controller: {0}")]
    Control(#[from] ControlError),
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub seed: u64,
    pub duration_us: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    #[serde(default = "default_divergence_bound")]
    pub divergence_bound: f64,
    /// per-output absolute bound on physically reachable readings
    pub envelope: Vec<f64>,
}

fn default_divergence_bound() -> f64 {
    1e6
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub qw: Vec<Vec<f64>>,
    pub detector_window: usize,
    /// explicit threshold; exclusive with `tau_percentile`
    pub tau: Option<f64>,
    /// chi-square percentile for the threshold; exclusive with `tau`
    pub tau_percentile: Option<f64>,
    #[serde(default = "default_hysteresis")]
    pub hysteresis: u32,
    pub control_period_us: u64,
    pub reference: Vec<f64>,
}

fn default_hysteresis() -> u32 {
    3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_offset")]
    pub offset: f64,
    #[serde(default = "default_registers_per_value")]
    pub registers_per_value: u8,
}

fn default_scale() -> f64 {
    0.001
}
fn default_offset() -> f64 {
    -32.768
}
fn default_registers_per_value() -> u8 {
    1
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            scale: default_scale(),
            offset: default_offset(),
            registers_per_value: default_registers_per_value(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolesSection {
    pub plant: String,
    pub controller: String,
    pub pn: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
    pub latency_us: u64,
    pub bandwidth_bps: i64,
    #[serde(default)]
    pub loss_prob: f64,
    #[serde(default = "default_max_queue_us")]
    pub max_queue_us: u64,
}

fn default_max_queue_us() -> u64 {
    crate::net::DEFAULT_MAX_QUEUE_US
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub nodes: Vec<NodeConfig>,
    pub links: Vec<LinkConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PnSection {
    #[serde(default = "default_paths_per_pair")]
    pub paths_per_pair: usize,
    #[serde(default = "default_tau_suspicious")]
    pub tau_suspicious: u32,
    #[serde(default = "default_tau_malicious")]
    pub tau_malicious: u32,
    #[serde(default = "default_delta_behavior")]
    pub delta_behavior: f64,
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
    #[serde(default = "default_id_window")]
    pub id_window: usize,
    #[serde(default = "default_condition_threshold")]
    pub condition_threshold: f64,
    pub middlebox: String,
    pub sinkhole: String,
    pub probes: Vec<String>,
    #[serde(default = "default_ctrl_plane_delay")]
    pub ctrl_plane_delay_us: u64,
    #[serde(default = "default_rule_install_delay")]
    pub rule_install_delay_us: u64,
    #[serde(default = "default_rule_propagation_bound")]
    pub rule_propagation_bound_us: u64,
    #[serde(default = "default_fault_horizon")]
    pub fault_horizon_us: u64,
    #[serde(default = "default_txn_history")]
    pub txn_history: usize,
}

fn default_paths_per_pair() -> usize {
    3
}
fn default_tau_suspicious() -> u32 {
    3
}
fn default_tau_malicious() -> u32 {
    10
}
fn default_delta_behavior() -> f64 {
    0.1
}
fn default_min_samples() -> usize {
    crate::sysid::DEFAULT_MIN_SAMPLES
}
fn default_id_window() -> usize {
    800
}
fn default_condition_threshold() -> f64 {
    crate::sysid::DEFAULT_CONDITION_THRESHOLD
}
fn default_ctrl_plane_delay() -> u64 {
    2_000
}
fn default_rule_install_delay() -> u64 {
    5_000
}
fn default_rule_propagation_bound() -> u64 {
    10_000
}
fn default_fault_horizon() -> u64 {
    1_000_000
}
fn default_txn_history() -> usize {
    128
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: String,
    pub start_us: u64,
    pub stop_us: u64,
    pub locus: String,
    pub record_frames: Option<usize>,
    pub preserve_transaction_ids: Option<bool>,
    pub bias: Option<Vec<f64>>,
    pub scale: Option<f64>,
    pub rate_pps: Option<u64>,
    pub frame_bytes: Option<usize>,
    pub target: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    /// the two endpoint node names of the failing link
    pub link: Vec<String>,
    pub fail_at_us: u64,
    pub restore_at_us: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub sim: SimSection,
    pub plant: PlantSection,
    pub controller: ControllerSection,
    #[serde(default)]
    pub codec: CodecSection,
    pub roles: RolesSection,
    pub topology: TopologySection,
    pub pnctrl: PnSection,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub faults: Vec<FaultConfig>,
}

/// Fully validated scenario. Construction succeeds only when matrices,
/// topology, roles, attacks and faults are all consistent.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub raw: RawConfig,
    pub topology: Topology,
    pub plant_host: NodeIdx,
    pub controller_host: NodeIdx,
    pub pn_host: NodeIdx,
    pub middlebox_host: NodeIdx,
    pub sinkhole_host: NodeIdx,
    pub probe_switches: Vec<NodeIdx>,
    pub attacks: Vec<AttackSpec>,
    pub faults: Vec<ResolvedFault>,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct ResolvedFault {
    pub link: (NodeIdx, NodeIdx),
    pub fail_at: SimTime,
    pub restore_at: Option<SimTime>,
}

pub fn matrix(key: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    if rows.is_empty() {
        return Err(invalid(key, "matrix must not be empty"));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(key, "matrix rows must be non-empty and equal length"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(invalid(key, "matrix entries must be finite"));
    }
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        Self::validate(raw)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn seed(&self) -> u64 {
        self.raw.sim.seed
    }

    pub fn duration(&self) -> SimTime {
        SimTime::from_micros(self.raw.sim.duration_us)
    }

    pub fn codec(&self) -> RegisterCodec {
        RegisterCodec {
            scale: self.raw.codec.scale,
            offset: self.raw.codec.offset,
            registers_per_value: self.raw.codec.registers_per_value,
        }
    }

    pub fn plant_model(&self) -> Result<StateSpaceModel, PlantError> {
        StateSpaceModel::new(
            matrix("plant.a", &self.raw.plant.a).expect("validated"),
            matrix("plant.b", &self.raw.plant.b).expect("validated"),
            matrix("plant.c", &self.raw.plant.c).expect("validated"),
            matrix("plant.w", &self.raw.plant.w).expect("validated"),
            matrix("plant.v", &self.raw.plant.v).expect("validated"),
        )
    }

    pub fn initial_state(&self) -> DVector<f64> {
        DVector::from_vec(self.raw.plant.x0.clone())
    }

    pub fn reference(&self) -> DVector<f64> {
        DVector::from_vec(self.raw.controller.reference.clone())
    }

    fn validate(raw: RawConfig) -> Result<Self, ConfigError> {
        // matrices and dimensional consistency
        let a = matrix("plant.a", &raw.plant.a)?;
        let b = matrix("plant.b", &raw.plant.b)?;
        let c = matrix("plant.c", &raw.plant.c)?;
        let w = matrix("plant.w", &raw.plant.w)?;
        let v = matrix("plant.v", &raw.plant.v)?;
        let model = StateSpaceModel::new(a.clone(), b.clone(), c, w, v)?;
        model.require_pd_measurement_noise()?;
        let n = model.state_dim();
        let p = model.output_dim();
        if raw.plant.x0.len() != n {
            return Err(invalid("plant.x0", format!("expected {n} entries")));
        }
        if raw.plant.envelope.len() != p {
            return Err(invalid("plant.envelope", format!("expected {p} entries")));
        }
        if raw.plant.envelope.iter().any(|e| *e <= 0.0) {
            return Err(invalid("plant.envelope", "bounds must be positive"));
        }
        if raw.plant.divergence_bound <= 0.0 {
            return Err(invalid("plant.divergence_bound", "must be positive"));
        }

        let q = matrix("controller.q", &raw.controller.q)?;
        let r = matrix("controller.r", &raw.controller.r)?;
        let qw = matrix("controller.qw", &raw.controller.qw)?;
        if qw.nrows() != model.input_dim() || qw.ncols() != model.input_dim() {
            return Err(invalid("controller.qw", "must be input-dimension square"));
        }
        if raw.controller.reference.len() != n {
            return Err(invalid("controller.reference", format!("expected {n} entries")));
        }
        if raw.controller.detector_window == 0 {
            return Err(invalid("controller.detector_window", "must be at least 1"));
        }
        if raw.controller.control_period_us == 0 {
            return Err(invalid("controller.control_period_us", "must be positive"));
        }
        // closed-loop stability is a load-time requirement
        let _gain = lqr_gain(&a, &b, &q, &r)?;

        let tau = match (raw.controller.tau, raw.controller.tau_percentile) {
            (Some(t), None) => {
                if t <= 0.0 {
                    return Err(invalid("controller.tau", "must be positive"));
                }
                t
            }
            (None, Some(pct)) => {
                if !(0.0..1.0).contains(&pct) {
                    return Err(invalid("controller.tau_percentile", "must be in (0, 1)"));
                }
                detector_threshold(p, raw.controller.detector_window, pct)
            }
            (None, None) => detector_threshold(p, raw.controller.detector_window, 0.95),
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "controller.tau",
                    "tau and tau_percentile are mutually exclusive",
                ))
            }
        };

        if raw.codec.scale <= 0.0 {
            return Err(invalid("codec.scale", "must be positive"));
        }
        if !matches!(raw.codec.registers_per_value, 1 | 2) {
            return Err(invalid("codec.registers_per_value", "must be 1 or 2"));
        }

        // topology
        let mut names = BTreeSet::new();
        for node in &raw.topology.nodes {
            if !names.insert(node.name.clone()) {
                return Err(invalid("topology.nodes", format!("duplicate node `{}`", node.name)));
            }
        }
        let node_defs: Vec<NodeDef> = raw
            .topology
            .nodes
            .iter()
            .map(|nc| NodeDef {
                name: nc.name.clone(),
                kind: nc.kind,
            })
            .collect();
        let index_of = |key: &'static str, name: &str| -> Result<NodeIdx, ConfigError> {
            raw.topology
                .nodes
                .iter()
                .position(|nc| nc.name == name)
                .map(|i| NodeIdx(i as u32))
                .ok_or_else(|| invalid(key, format!("unknown node `{name}`")))
        };
        let mut link_defs = Vec::new();
        for lc in &raw.topology.links {
            if lc.bandwidth_bps <= 0 {
                return Err(invalid(
                    "topology.links.bandwidth_bps",
                    format!("link {}-{}: bandwidth must be positive", lc.a, lc.b),
                ));
            }
            link_defs.push(LinkDef {
                a: index_of("topology.links.a", &lc.a)?,
                b: index_of("topology.links.b", &lc.b)?,
                latency_us: lc.latency_us,
                bandwidth_bps: lc.bandwidth_bps as u64,
                loss_prob: lc.loss_prob,
                max_queue_us: lc.max_queue_us,
            });
        }
        let topology = Topology::new(node_defs, link_defs)?;

        // roles
        let require_host = |key: &'static str, name: &str| -> Result<NodeIdx, ConfigError> {
            let idx = index_of(key, name)?;
            if topology.node_kind(idx) != NodeKind::Host {
                return Err(invalid(key, format!("`{name}` must be a host")));
            }
            Ok(idx)
        };
        let plant_host = require_host("roles.plant", &raw.roles.plant)?;
        let controller_host = require_host("roles.controller", &raw.roles.controller)?;
        let pn_host = require_host("roles.pn", &raw.roles.pn)?;
        let middlebox_host = require_host("pnctrl.middlebox", &raw.pnctrl.middlebox)?;
        let sinkhole_host = require_host("pnctrl.sinkhole", &raw.pnctrl.sinkhole)?;
        let mut probe_switches = Vec::new();
        for probe in &raw.pnctrl.probes {
            let idx = index_of("pnctrl.probes", probe)?;
            if topology.node_kind(idx) != NodeKind::Switch {
                return Err(invalid("pnctrl.probes", format!("`{probe}` must be a switch")));
            }
            probe_switches.push(idx);
        }
        if raw.pnctrl.paths_per_pair == 0 {
            return Err(invalid("pnctrl.paths_per_pair", "must be at least 1"));
        }
        if raw.pnctrl.tau_malicious <= raw.pnctrl.tau_suspicious {
            return Err(invalid(
                "pnctrl.tau_malicious",
                "must exceed tau_suspicious",
            ));
        }
        if raw.pnctrl.delta_behavior <= 0.0 {
            return Err(invalid("pnctrl.delta_behavior", "must be positive"));
        }

        // attacks
        let mut attacks = Vec::new();
        for (i, ac) in raw.attacks.iter().enumerate() {
            if ac.start_us >= ac.stop_us {
                return Err(invalid("attacks.start_us", format!("attack #{i}: start must precede stop")));
            }
            let locus = index_of("attacks.locus", &ac.locus)?;
            let reject_extra =
                |field: &'static str, present: bool| -> Result<(), ConfigError> {
                    if present {
                        Err(invalid(
                            "attacks",
                            format!("attack #{i}: `{field}` does not apply to kind `{}`", ac.kind),
                        ))
                    } else {
                        Ok(())
                    }
                };
            let kind = match ac.kind.as_str() {
                "replay" => {
                    reject_extra("bias", ac.bias.is_some())?;
                    reject_extra("scale", ac.scale.is_some())?;
                    reject_extra("rate_pps", ac.rate_pps.is_some())?;
                    reject_extra("frame_bytes", ac.frame_bytes.is_some())?;
                    reject_extra("target", ac.target.is_some())?;
                    if topology.node_kind(locus) != NodeKind::Switch {
                        return Err(invalid("attacks.locus", format!("attack #{i}: replay locus must be a switch")));
                    }
                    AttackKind::Replay {
                        record_frames: ac.record_frames.unwrap_or(50),
                        preserve_transaction_ids: ac.preserve_transaction_ids.unwrap_or(false),
                    }
                }
                "false-data-injection" => {
                    reject_extra("record_frames", ac.record_frames.is_some())?;
                    reject_extra(
                        "preserve_transaction_ids",
                        ac.preserve_transaction_ids.is_some(),
                    )?;
                    reject_extra("scale", ac.scale.is_some())?;
                    reject_extra("rate_pps", ac.rate_pps.is_some())?;
                    reject_extra("frame_bytes", ac.frame_bytes.is_some())?;
                    reject_extra("target", ac.target.is_some())?;
                    if topology.node_kind(locus) != NodeKind::Switch {
                        return Err(invalid("attacks.locus", format!("attack #{i}: injection locus must be a switch")));
                    }
                    let bias = ac.bias.clone().ok_or_else(|| {
                        invalid("attacks.bias", format!("attack #{i}: `bias` required"))
                    })?;
                    if bias.len() != p {
                        return Err(invalid("attacks.bias", format!("attack #{i}: expected {p} entries")));
                    }
                    AttackKind::FalseDataInjection { bias }
                }
                "mitm-rewrite" => {
                    reject_extra("record_frames", ac.record_frames.is_some())?;
                    reject_extra(
                        "preserve_transaction_ids",
                        ac.preserve_transaction_ids.is_some(),
                    )?;
                    reject_extra("bias", ac.bias.is_some())?;
                    reject_extra("rate_pps", ac.rate_pps.is_some())?;
                    reject_extra("frame_bytes", ac.frame_bytes.is_some())?;
                    reject_extra("target", ac.target.is_some())?;
                    if topology.node_kind(locus) != NodeKind::Switch {
                        return Err(invalid("attacks.locus", format!("attack #{i}: rewrite locus must be a switch")));
                    }
                    AttackKind::MitmRewrite {
                        scale: ac.scale.ok_or_else(|| {
                            invalid("attacks.scale", format!("attack #{i}: `scale` required"))
                        })?,
                    }
                }
                "dos-flood" => {
                    reject_extra("record_frames", ac.record_frames.is_some())?;
                    reject_extra(
                        "preserve_transaction_ids",
                        ac.preserve_transaction_ids.is_some(),
                    )?;
                    reject_extra("bias", ac.bias.is_some())?;
                    reject_extra("scale", ac.scale.is_some())?;
                    if topology.node_kind(locus) != NodeKind::Host {
                        return Err(invalid("attacks.locus", format!("attack #{i}: flood locus must be a host")));
                    }
                    let target_name = ac.target.clone().ok_or_else(|| {
                        invalid("attacks.target", format!("attack #{i}: `target` required"))
                    })?;
                    let target = require_host("attacks.target", &target_name)?;
                    AttackKind::DosFlood {
                        rate_pps: ac.rate_pps.ok_or_else(|| {
                            invalid("attacks.rate_pps", format!("attack #{i}: `rate_pps` required"))
                        })?,
                        frame_bytes: ac.frame_bytes.unwrap_or(125),
                        target,
                    }
                }
                other => {
                    return Err(invalid(
                        "attacks.kind",
                        format!("attack #{i}: unknown kind `{other}`"),
                    ))
                }
            };
            attacks.push(AttackSpec {
                kind,
                start: SimTime::from_micros(ac.start_us),
                stop: SimTime::from_micros(ac.stop_us),
                locus,
            });
        }

        // faults
        let mut faults = Vec::new();
        for (i, fc) in raw.faults.iter().enumerate() {
            if fc.link.len() != 2 {
                return Err(invalid("faults.link", format!("fault #{i}: expected two endpoints")));
            }
            let a = index_of("faults.link", &fc.link[0])?;
            let b = index_of("faults.link", &fc.link[1])?;
            if topology.link_between(a, b).is_none() {
                return Err(invalid(
                    "faults.link",
                    format!("fault #{i}: no link between `{}` and `{}`", fc.link[0], fc.link[1]),
                ));
            }
            if let Some(restore) = fc.restore_at_us {
                if restore <= fc.fail_at_us {
                    return Err(invalid("faults.restore_at_us", format!("fault #{i}: restore must follow failure")));
                }
            }
            faults.push(ResolvedFault {
                link: (a, b),
                fail_at: SimTime::from_micros(fc.fail_at_us),
                restore_at: fc.restore_at_us.map(SimTime::from_micros),
            });
        }

        tau_sanity(tau)?;
        Ok(ScenarioConfig {
            raw,
            topology,
            plant_host,
            controller_host,
            pn_host,
            middlebox_host,
            sinkhole_host,
            probe_switches,
            attacks,
            faults,
            tau,
        })
    }
}

fn tau_sanity(tau: f64) -> Result<(), ConfigError> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(invalid("controller.tau", "resolved threshold must be positive"));
    }
    Ok(())
}
