//! Programmable network controller: QoS-sorted path lookup, probe
//! ingestion and suspicion scoring, class-based path assignment with
//! quarantine and sinkhole routing, behavior identification from mirrored
//! traffic, and the verdict logic that corroborates physical-layer alerts
//! with network evidence.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{AlertKind, AlertSignal};
use crate::net::{
    Action, FlowRule, LinkIdx, MatchSpec, NodeIdx, Proto, Topology,
};
use crate::paths::{k_shortest_paths, path_via};
use crate::scada::RegisterCodec;
use crate::sim::SimTime;
use crate::sysid::{identify_behavior, BehaviorEstimate, IdSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficClass {
    Legitimate,
    Suspicious,
    Malicious,
}

impl TrafficClass {
    fn next_up(self) -> Option<TrafficClass> {
        match self {
            TrafficClass::Legitimate => Some(TrafficClass::Suspicious),
            TrafficClass::Suspicious => Some(TrafficClass::Malicious),
            TrafficClass::Malicious => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub src: NodeIdx,
    pub dst: NodeIdx,
    pub proto: Proto,
}

#[derive(Debug, Clone)]
pub struct FlowRecord {
    pub key: FlowKey,
    pub class: TrafficClass,
    pub suspicion: u32,
    pub current_label: Option<u16>,
    pub current_path: Vec<NodeIdx>,
    pub last_seen: SimTime,
    pub declared: bool,
}

#[derive(Debug, Clone)]
pub struct PathEntry {
    pub label: u16,
    pub hops: Vec<NodeIdx>,
    pub latency_us: u64,
    pub qos_score: f64,
    pub eligibility: BTreeSet<TrafficClass>,
}

impl PathEntry {
    pub fn ingress(&self) -> NodeIdx {
        self.hops[0]
    }

    pub fn egress(&self) -> NodeIdx {
        *self.hops.last().expect("non-empty path")
    }
}

/// QoS-sorted, labeled inventory of switch-to-switch paths.
#[derive(Debug, Clone, Default)]
pub struct PathTable {
    entries: BTreeMap<(NodeIdx, NodeIdx), Vec<PathEntry>>,
}

impl PathTable {
    pub fn lookup(&self, ingress: NodeIdx, egress: NodeIdx) -> &[PathEntry] {
        self.entries
            .get(&(ingress, egress))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&(NodeIdx, NodeIdx), &Vec<PathEntry>)> {
        self.entries.iter()
    }

    pub fn best_for_class(
        &self,
        ingress: NodeIdx,
        egress: NodeIdx,
        class: TrafficClass,
    ) -> Option<&PathEntry> {
        let list = self.lookup(ingress, egress);
        match class {
            TrafficClass::Legitimate => list.first(),
            TrafficClass::Suspicious => list
                .iter()
                .find(|e| e.eligibility.contains(&TrafficClass::Suspicious))
                // no middlebox route: fall back to the lowest-ranked path
                .or_else(|| list.last()),
            // malicious pairs are redirected to the sinkhole switch by the
            // caller; within that pair the best path wins
            TrafficClass::Malicious => list.first(),
        }
    }

    /// Next-ranked alternative after the path labeled `current`.
    pub fn next_ranked(&self, ingress: NodeIdx, egress: NodeIdx, current: u16) -> Option<&PathEntry> {
        let list = self.lookup(ingress, egress);
        match list.iter().position(|e| e.label == current) {
            Some(pos) => list.get(pos + 1).or_else(|| {
                // current path no longer listed or is last; take the best
                list.iter().find(|e| e.label != current)
            }),
            None => list.first(),
        }
    }
}

/// Builds the path table: up to `k` loop-free paths per ordered switch
/// pair, ranked by latency with hop-count tie-break; `qos_score` is the
/// inverse latency. Paths through the middlebox switch are additionally
/// eligible for suspicious (quarantined) flows, and one such path is
/// appended per pair when the top-k misses it. Labels are unique and never
/// reused across recomputations (`label_base` advances).
pub fn compute_paths(
    topo: &Topology,
    link_up: impl Fn(LinkIdx) -> bool + Copy,
    k: usize,
    middlebox: Option<NodeIdx>,
    label_base: u16,
) -> PathTable {
    let mut entries = BTreeMap::new();
    let mut next_label = label_base;
    let switches: Vec<NodeIdx> = topo.switch_indices().collect();
    for &ingress in &switches {
        for &egress in &switches {
            let mut list = Vec::new();
            let found = k_shortest_paths(topo, link_up, ingress, egress, k);
            for (cost, hops) in found {
                let mut eligibility = BTreeSet::from([TrafficClass::Legitimate]);
                if middlebox.is_some_and(|mb| hops.contains(&mb)) {
                    eligibility.insert(TrafficClass::Suspicious);
                }
                list.push(PathEntry {
                    label: next_label,
                    hops,
                    latency_us: cost.latency_us,
                    qos_score: 1.0 / cost.latency_us.max(1) as f64,
                    eligibility,
                });
                next_label = next_label.wrapping_add(1);
            }
            if let Some(mb) = middlebox {
                let have_quarantine = list
                    .iter()
                    .any(|e| e.eligibility.contains(&TrafficClass::Suspicious));
                if !have_quarantine {
                    if let Some((cost, hops)) = path_via(topo, link_up, ingress, mb, egress, k.max(2))
                    {
                        list.push(PathEntry {
                            label: next_label,
                            hops,
                            latency_us: cost.latency_us,
                            qos_score: 1.0 / cost.latency_us.max(1) as f64,
                            eligibility: BTreeSet::from([
                                TrafficClass::Legitimate,
                                TrafficClass::Suspicious,
                            ]),
                        });
                        next_label = next_label.wrapping_add(1);
                    }
                }
            }
            if !list.is_empty() {
                entries.insert((ingress, egress), list);
            }
        }
    }
    PathTable { entries }
}

/// Evidence rules a probe report can trigger, each worth one suspicion
/// point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceKind {
    MalformedFrame,
    UnknownPair,
    EnvelopeViolation,
    DuplicateTransaction,
}

/// What a probe learned from one mirrored packet.
#[derive(Debug, Clone)]
pub enum PayloadDigest {
    SensorReadings { transaction_id: u16, registers: Vec<u16> },
    ActuationCommand { transaction_id: u16, registers: Vec<u16> },
    OtherFrame { transaction_id: u16 },
    Malformed { tag: &'static str },
    NotScada,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub flow: FlowKey,
    pub observed_at: NodeIdx,
    pub at: SimTime,
    pub digest: PayloadDigest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AckAction {
    ReroutedQuarantine,
    Sinkholed,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationAck {
    pub action: AckAction,
    pub flow: FlowKey,
    pub at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Attack,
    AttackSuspected,
    Fault,
}

#[derive(Debug, Clone)]
pub struct VerdictRecord {
    pub verdict: Verdict,
    pub flow: FlowKey,
    pub at: SimTime,
    pub suspicion: u32,
    pub behavior_deviation: Option<f64>,
    pub fault_evidence: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub flow: FlowKey,
    pub from: TrafficClass,
    pub to: TrafficClass,
    pub at: SimTime,
}

#[derive(Debug, Clone)]
pub struct RuleInstallCmd {
    pub switch: NodeIdx,
    pub rule: FlowRule,
}

#[derive(Debug, Clone)]
pub struct RuleRemoveCmd {
    pub switch: NodeIdx,
    pub rule_id: u64,
}

/// Everything one controller entry point decided: class transitions,
/// acknowledgments for the supervisor, and rule changes for the fabric.
#[derive(Debug, Default)]
pub struct PnOutcome {
    pub transitions: Vec<Transition>,
    pub acks: Vec<MitigationAck>,
    pub installs: Vec<RuleInstallCmd>,
    pub removals: Vec<RuleRemoveCmd>,
    pub verdict: Option<VerdictRecord>,
    pub evidence: Vec<(FlowKey, EvidenceKind)>,
}

impl PnOutcome {
    fn merge(&mut self, other: PnOutcome) {
        self.transitions.extend(other.transitions);
        self.acks.extend(other.acks);
        self.installs.extend(other.installs);
        self.removals.extend(other.removals);
        self.evidence.extend(other.evidence);
        if self.verdict.is_none() {
            self.verdict = other.verdict;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PnConfig {
    pub paths_per_pair: usize,
    pub tau_suspicious: u32,
    pub tau_malicious: u32,
    pub delta_behavior: f64,
    pub min_samples: usize,
    pub condition_threshold: f64,
    pub id_window: usize,
    pub middlebox_host: NodeIdx,
    pub sinkhole_host: NodeIdx,
    pub probes: BTreeSet<NodeIdx>,
    pub fault_horizon_us: u64,
    pub envelope: Vec<f64>,
    pub codec: RegisterCodec,
    pub txn_history: usize,
}

pub struct PnController {
    topo: Topology,
    cfg: PnConfig,
    link_up: Vec<bool>,
    pub path_table: PathTable,
    label_base: u16,
    flows: BTreeMap<FlowKey, FlowRecord>,
    flow_rules: BTreeMap<FlowKey, Vec<(NodeIdx, u64)>>,
    deployed_labels: BTreeSet<(NodeIdx, u16)>,
    txn_seen: BTreeMap<FlowKey, VecDeque<u16>>,
    next_rule_id: u64,
    // identification over the control pair's mirrored traffic
    sensor_flow: FlowKey,
    actuation_flow: FlowKey,
    last_y: Option<(u16, DVector<f64>)>,
    pending_u: Option<(u16, DVector<f64>)>,
    samples: VecDeque<IdSample>,
    behavior_cache: Option<(usize, Option<BehaviorEstimate>)>,
    nominal_a: DMatrix<f64>,
    nominal_b: DMatrix<f64>,
    nominal_v: DMatrix<f64>,
    link_down_log: Vec<(LinkIdx, SimTime)>,
    pub dropped_for_lack_of_path: u64,
}

impl PnController {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        topo: Topology,
        cfg: PnConfig,
        sensor_flow: FlowKey,
        actuation_flow: FlowKey,
        nominal_a: DMatrix<f64>,
        nominal_b: DMatrix<f64>,
        nominal_v: DMatrix<f64>,
    ) -> Self {
        let link_up = vec![true; topo.links.len()];
        let middlebox_switch = topo.host_switch(cfg.middlebox_host);
        let path_table = compute_paths(
            &topo,
            |li| link_up[li.0 as usize],
            cfg.paths_per_pair,
            middlebox_switch,
            1,
        );
        let label_base = path_table
            .pairs()
            .flat_map(|(_, v)| v.iter())
            .map(|e| e.label)
            .max()
            .map_or(1, |l| l.wrapping_add(1));
        PnController {
            topo,
            cfg,
            link_up,
            path_table,
            label_base,
            flows: BTreeMap::new(),
            flow_rules: BTreeMap::new(),
            deployed_labels: BTreeSet::new(),
            txn_seen: BTreeMap::new(),
            next_rule_id: 1,
            sensor_flow,
            actuation_flow,
            last_y: None,
            pending_u: None,
            samples: VecDeque::new(),
            behavior_cache: None,
            nominal_a,
            nominal_b,
            nominal_v,
            link_down_log: Vec::new(),
            dropped_for_lack_of_path: 0,
        }
    }

    pub fn flows(&self) -> impl Iterator<Item = &FlowRecord> {
        self.flows.values()
    }

    pub fn flow(&self, key: &FlowKey) -> Option<&FlowRecord> {
        self.flows.get(key)
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    fn middlebox_switch(&self) -> Option<NodeIdx> {
        self.topo.host_switch(self.cfg.middlebox_host)
    }

    fn sinkhole_switch(&self) -> NodeIdx {
        self.topo
            .host_switch(self.cfg.sinkhole_host)
            .expect("sinkhole host attaches to a switch")
    }

    fn flow_endpoints(&self, key: &FlowKey) -> Option<(NodeIdx, NodeIdx)> {
        Some((
            self.topo.host_switch(key.src)?,
            self.topo.host_switch(key.dst)?,
        ))
    }

    /// Declares an expected flow and returns the rules realizing its
    /// initial (legitimate) path assignment.
    pub fn declare_flow(&mut self, key: FlowKey, now: SimTime) -> PnOutcome {
        let record = FlowRecord {
            key,
            class: TrafficClass::Legitimate,
            suspicion: 0,
            current_label: None,
            current_path: Vec::new(),
            last_seen: now,
            declared: true,
        };
        self.flows.insert(key, record);
        self.assign_and_build(key, now)
    }

    /// Chooses the path for the flow's class and returns the edge rules
    /// implementing it. Malicious flows route to the sinkhole switch and
    /// are delivered to the sinkhole host.
    fn assign_and_build(&mut self, key: FlowKey, _now: SimTime) -> PnOutcome {
        let mut out = PnOutcome::default();
        let Some((ingress, egress)) = self.flow_endpoints(&key) else {
            return out;
        };
        let class = self.flows.get(&key).map_or(TrafficClass::Legitimate, |f| f.class);
        let (pair_egress, deliver_to) = match class {
            TrafficClass::Malicious => (self.sinkhole_switch(), self.cfg.sinkhole_host),
            _ => (egress, key.dst),
        };
        let entry = self
            .path_table
            .best_for_class(ingress, pair_egress, class)
            .cloned();
        let Some(entry) = entry else {
            // no eligible path: install an edge drop rule and raise the
            // operator-visible counter
            self.dropped_for_lack_of_path += 1;
            let rule_id = self.fresh_rule_id();
            out.installs.push(RuleInstallCmd {
                switch: ingress,
                rule: FlowRule {
                    id: rule_id,
                    priority: 200,
                    matcher: MatchSpec {
                        src: Some(key.src),
                        dst: Some(key.dst),
                        proto: Some(key.proto),
                        label: None,
                    },
                    actions: vec![Action::Drop],
                },
            });
            self.replace_flow_rules(&key, vec![(ingress, rule_id)], &mut out);
            return out;
        };
        let mut rule_ids = Vec::new();
        out.merge(self.build_path_rules(&key, &entry, deliver_to, 100, &mut rule_ids));
        if class == TrafficClass::Malicious && entry.ingress() != egress {
            // catch rule at the original egress: in-flight packets that
            // already passed the ingress get shunted to the sinkhole too
            let catch = self
                .path_table
                .best_for_class(egress, pair_egress, TrafficClass::Malicious)
                .cloned();
            if let Some(catch) = catch {
                out.merge(self.build_path_rules(&key, &catch, deliver_to, 150, &mut rule_ids));
            }
        }
        self.replace_flow_rules(&key, rule_ids, &mut out);
        if let Some(flow) = self.flows.get_mut(&key) {
            flow.current_label = Some(entry.label);
            flow.current_path = entry.hops.clone();
        }
        out
    }

    fn fresh_rule_id(&mut self) -> u64 {
        let id = self.next_rule_id;
        self.next_rule_id += 1;
        id
    }

    fn mirror_if_probe(&self, switch: NodeIdx, actions: &mut Vec<Action>) {
        if self.cfg.probes.contains(&switch) {
            actions.push(Action::MirrorToProbe(switch));
        }
    }

    /// Edge rules for one flow on one labeled path: the ingress switch
    /// stamps the label and forwards; interior switches match the label;
    /// the egress switch matches label plus flow destination and hands the
    /// packet to its delivery host. `head_priority` orders competing
    /// per-flow head rules (mitigation catch rules outrank assignments).
    fn build_path_rules(
        &mut self,
        key: &FlowKey,
        entry: &PathEntry,
        deliver_to: NodeIdx,
        head_priority: i32,
        flow_rule_ids: &mut Vec<(NodeIdx, u64)>,
    ) -> PnOutcome {
        let mut out = PnOutcome::default();
        let hops = &entry.hops;

        let egress = entry.egress();
        if hops.len() == 1 {
            // ingress and egress coincide: one rule does label, mirror, and
            // host delivery
            let port = self
                .topo
                .port_toward(egress, deliver_to)
                .expect("delivery host adjacent to egress");
            let mut actions = vec![Action::SetLabel(entry.label)];
            self.mirror_if_probe(egress, &mut actions);
            actions.push(Action::Forward(port));
            let id = self.fresh_rule_id();
            out.installs.push(RuleInstallCmd {
                switch: egress,
                rule: FlowRule {
                    id,
                    priority: head_priority,
                    matcher: MatchSpec {
                        src: Some(key.src),
                        dst: Some(key.dst),
                        proto: Some(key.proto),
                        label: None,
                    },
                    actions,
                },
            });
            flow_rule_ids.push((egress, id));
            return out;
        }

        // ingress: stamp the label, then forward toward the next hop
        {
            let ingress = hops[0];
            let port = self
                .topo
                .port_toward(ingress, hops[1])
                .expect("adjacent hop");
            let mut actions = vec![Action::SetLabel(entry.label)];
            self.mirror_if_probe(ingress, &mut actions);
            actions.push(Action::Forward(port));
            let id = self.fresh_rule_id();
            out.installs.push(RuleInstallCmd {
                switch: ingress,
                rule: FlowRule {
                    id,
                    priority: head_priority,
                    matcher: MatchSpec {
                        src: Some(key.src),
                        dst: Some(key.dst),
                        proto: Some(key.proto),
                        label: None,
                    },
                    actions,
                },
            });
            flow_rule_ids.push((ingress, id));
        }

        // interior hops: label-switched, shared across flows on this path
        for w in 1..hops.len() - 1 {
            let here = hops[w];
            if self.deployed_labels.contains(&(here, entry.label)) {
                continue;
            }
            let port = self
                .topo
                .port_toward(here, hops[w + 1])
                .expect("adjacent hop");
            let mut actions = Vec::new();
            self.mirror_if_probe(here, &mut actions);
            actions.push(Action::Forward(port));
            let id = self.fresh_rule_id();
            out.installs.push(RuleInstallCmd {
                switch: here,
                rule: FlowRule {
                    id,
                    priority: 50,
                    matcher: MatchSpec {
                        label: Some(entry.label),
                        ..Default::default()
                    },
                    actions,
                },
            });
            self.deployed_labels.insert((here, entry.label));
        }

        // egress: label plus destination selects the delivery host
        {
            let port = self
                .topo
                .port_toward(egress, deliver_to)
                .expect("delivery host adjacent to egress");
            let mut actions = Vec::new();
            self.mirror_if_probe(egress, &mut actions);
            actions.push(Action::Forward(port));
            let id = self.fresh_rule_id();
            out.installs.push(RuleInstallCmd {
                switch: egress,
                rule: FlowRule {
                    id,
                    priority: 60,
                    matcher: MatchSpec {
                        dst: Some(key.dst),
                        label: Some(entry.label),
                        ..Default::default()
                    },
                    actions,
                },
            });
            flow_rule_ids.push((egress, id));
        }
        out
    }

    fn replace_flow_rules(
        &mut self,
        key: &FlowKey,
        new_rules: Vec<(NodeIdx, u64)>,
        out: &mut PnOutcome,
    ) {
        if let Some(old) = self.flow_rules.insert(*key, new_rules) {
            for (switch, rule_id) in old {
                out.removals.push(RuleRemoveCmd { switch, rule_id });
            }
        }
    }

    /// One class step up, with path reassignment and acknowledgment.
    fn escalate_one(&mut self, key: FlowKey, now: SimTime) -> Option<PnOutcome> {
        let flow = self.flows.get_mut(&key)?;
        let from = flow.class;
        let to = from.next_up()?;
        flow.class = to;
        let mut out = self.assign_and_build(key, now);
        out.transitions.push(Transition { flow: key, from, to, at: now });
        out.acks.push(MitigationAck {
            action: match to {
                TrafficClass::Suspicious => AckAction::ReroutedQuarantine,
                TrafficClass::Malicious => AckAction::Sinkholed,
                TrafficClass::Legitimate => AckAction::None,
            },
            flow: key,
            at: now,
        });
        Some(out)
    }

    /// Walks the flow's class up to `target` one transition at a time so
    /// the escalation order is never skipped.
    fn escalate_to(&mut self, key: FlowKey, target: TrafficClass, now: SimTime) -> PnOutcome {
        let mut out = PnOutcome::default();
        while self
            .flows
            .get(&key)
            .is_some_and(|f| f.class < target)
        {
            match self.escalate_one(key, now) {
                Some(step) => out.merge(step),
                None => break,
            }
        }
        out
    }

    /// Supervised de-escalation back to legitimate after a cleared alert.
    fn clear_flow(&mut self, key: FlowKey, now: SimTime) -> PnOutcome {
        let mut out = PnOutcome::default();
        let Some(flow) = self.flows.get_mut(&key) else {
            return out;
        };
        if flow.class == TrafficClass::Legitimate {
            return out;
        }
        let from = flow.class;
        flow.class = TrafficClass::Legitimate;
        flow.suspicion = 0;
        out.merge(self.assign_and_build(key, now));
        out.transitions.push(Transition {
            flow: key,
            from,
            to: TrafficClass::Legitimate,
            at: now,
        });
        out.acks.push(MitigationAck {
            action: AckAction::None,
            flow: key,
            at: now,
        });
        out
    }

    fn evidence_for(&mut self, report: &ProbeReport, declared: bool) -> Vec<EvidenceKind> {
        let mut hits = Vec::new();
        if !declared {
            hits.push(EvidenceKind::UnknownPair);
        }
        match &report.digest {
            PayloadDigest::Malformed { .. } => hits.push(EvidenceKind::MalformedFrame),
            PayloadDigest::SensorReadings {
                transaction_id,
                registers,
            } => {
                if let Ok(values) = self.cfg.codec.unpack_measurement(registers) {
                    let outside = values
                        .iter()
                        .zip(self.cfg.envelope.iter())
                        .any(|(v, bound)| v.abs() > *bound);
                    if outside {
                        hits.push(EvidenceKind::EnvelopeViolation);
                    }
                }
                if self.remember_txn(report.flow, *transaction_id) {
                    hits.push(EvidenceKind::DuplicateTransaction);
                }
            }
            PayloadDigest::ActuationCommand { transaction_id, .. }
            | PayloadDigest::OtherFrame { transaction_id } => {
                if self.remember_txn(report.flow, *transaction_id) {
                    hits.push(EvidenceKind::DuplicateTransaction);
                }
            }
            PayloadDigest::NotScada => {}
        }
        hits
    }

    /// Records the transaction id; true when it repeats within the history
    /// horizon (the replay indication).
    fn remember_txn(&mut self, flow: FlowKey, txn: u16) -> bool {
        let seen = self.txn_seen.entry(flow).or_default();
        let duplicate = seen.contains(&txn);
        seen.push_back(txn);
        while seen.len() > self.cfg.txn_history {
            seen.pop_front();
        }
        duplicate
    }

    fn record_id_sample(&mut self, report: &ProbeReport) {
        let digest = match &report.digest {
            PayloadDigest::SensorReadings {
                transaction_id,
                registers,
            } if report.flow == self.sensor_flow => {
                let Ok(y) = self.cfg.codec.unpack_measurement(registers) else {
                    return;
                };
                Some((true, *transaction_id, y))
            }
            PayloadDigest::ActuationCommand {
                transaction_id,
                registers,
            } if report.flow == self.actuation_flow => {
                let Ok(u) = self.cfg.codec.unpack_measurement(registers) else {
                    return;
                };
                Some((false, *transaction_id, u))
            }
            _ => None,
        };
        let Some((is_sensor, txn, values)) = digest else {
            return;
        };
        if is_sensor {
            if let (Some((y_txn, y_prev)), Some((u_txn, u))) =
                (self.last_y.take(), self.pending_u.take())
            {
                // measurements and commands share the step counter; only an
                // unbroken k, k, k+1 chain forms a sample
                if u_txn == y_txn && txn == y_txn.wrapping_add(1) {
                    self.samples.push_back(IdSample {
                        y_prev,
                        u,
                        y_next: values.clone(),
                    });
                    while self.samples.len() > self.cfg.id_window {
                        self.samples.pop_front();
                    }
                    self.behavior_cache = None;
                }
            }
            self.last_y = Some((txn, values));
        } else {
            self.pending_u = Some((txn, values));
        }
    }

    /// Current behavior estimate over the sample window, when computable.
    pub fn behavior_estimate(&mut self) -> Option<BehaviorEstimate> {
        let count = self.samples.len();
        if let Some((cached_count, est)) = &self.behavior_cache {
            if *cached_count == count {
                return est.clone();
            }
        }
        let samples: Vec<IdSample> = self.samples.iter().cloned().collect();
        let est = identify_behavior(
            &samples,
            self.cfg.min_samples,
            self.cfg.condition_threshold,
            Some(&self.nominal_v),
        )
        .ok();
        self.behavior_cache = Some((count, est.clone()));
        est
    }

    pub fn behavior_deviation(&mut self) -> Option<f64> {
        let nominal_a = self.nominal_a.clone();
        let nominal_b = self.nominal_b.clone();
        self.behavior_estimate()
            .map(|est| est.deviation(&nominal_a, &nominal_b))
    }

    /// Ingests one probe report at decision time `now`: updates the flow
    /// record, applies the evidence rules, and performs any
    /// threshold-triggered escalation.
    pub fn ingest_probe_report(&mut self, report: ProbeReport, now: SimTime) -> PnOutcome {
        let mut out = PnOutcome::default();
        let key = report.flow;
        let declared = self.flows.get(&key).is_some_and(|f| f.declared);
        self.flows.entry(key).or_insert_with(|| FlowRecord {
            key,
            class: TrafficClass::Legitimate,
            suspicion: 0,
            current_label: None,
            current_path: Vec::new(),
            last_seen: now,
            declared: false,
        });
        let hits = self.evidence_for(&report, declared);
        for &kind in &hits {
            out.evidence.push((key, kind));
        }
        let (suspicion, class) = {
            let flow = self.flows.get_mut(&key).expect("flow just ensured");
            flow.last_seen = now;
            flow.suspicion += hits.len() as u32;
            (flow.suspicion, flow.class)
        };
        let target = if suspicion >= self.cfg.tau_malicious {
            Some(TrafficClass::Malicious)
        } else if suspicion >= self.cfg.tau_suspicious {
            Some(TrafficClass::Suspicious)
        } else {
            None
        };
        if let Some(target) = target {
            if class < target {
                out.merge(self.escalate_to(key, target, now));
            }
        }
        self.record_id_sample(&report);
        out
    }

    /// Routes an unknown or unrouted flow after a table miss. Misses from
    /// packets racing an in-flight rule push change nothing: the buffered
    /// packet is re-evaluated when the pending install lands, and fresh
    /// assignments here would only churn (and could overwrite a newer
    /// class's rules with stale ones).
    pub fn on_table_miss(&mut self, key: FlowKey, now: SimTime) -> PnOutcome {
        if let Some(flow) = self.flows.get(&key) {
            if flow.current_label.is_some() {
                return PnOutcome::default();
            }
        } else {
            self.flows.insert(
                key,
                FlowRecord {
                    key,
                    class: TrafficClass::Legitimate,
                    suspicion: 0,
                    current_label: None,
                    current_path: Vec::new(),
                    last_seen: now,
                    declared: false,
                },
            );
        }
        self.assign_and_build(key, now)
    }

    pub fn on_link_down(&mut self, link: LinkIdx, now: SimTime) {
        if self.link_up[link.0 as usize] {
            self.link_up[link.0 as usize] = false;
            self.link_down_log.push((link, now));
            self.recompute_paths();
        }
    }

    pub fn on_link_up(&mut self, link: LinkIdx) {
        if !self.link_up[link.0 as usize] {
            self.link_up[link.0 as usize] = true;
            self.recompute_paths();
        }
    }

    fn recompute_paths(&mut self) {
        let middlebox = self.middlebox_switch();
        let link_up = self.link_up.clone();
        self.path_table = compute_paths(
            &self.topo,
            |li| link_up[li.0 as usize],
            self.cfg.paths_per_pair,
            middlebox,
            self.label_base,
        );
        self.label_base = self
            .path_table
            .pairs()
            .flat_map(|(_, v)| v.iter())
            .map(|e| e.label)
            .max()
            .map_or(self.label_base, |l| l.wrapping_add(1));
    }

    /// True when a link on the flow's currently assigned path failed within
    /// the fault horizon (or is still down).
    fn fault_evidence_on_path(&self, key: &FlowKey, now: SimTime) -> bool {
        let Some(flow) = self.flows.get(key) else {
            return false;
        };
        let Some((ingress, egress)) = self.flow_endpoints(key) else {
            return false;
        };
        // include the host attachment links: a dead edge link is a fault too
        let mut path_links: Vec<LinkIdx> = Vec::new();
        if let Some(li) = self.topo.link_between(key.src, ingress) {
            path_links.push(li);
        }
        if let Some(li) = self.topo.link_between(key.dst, egress) {
            path_links.push(li);
        }
        for w in flow.current_path.windows(2) {
            if let Some(li) = self.topo.link_between(w[0], w[1]) {
                path_links.push(li);
            }
        }
        path_links.iter().any(|li| {
            !self.link_up[li.0 as usize]
                || self
                    .link_down_log
                    .iter()
                    .any(|(l, t)| l == li && now.saturating_sub(*t) <= self.cfg.fault_horizon_us)
        })
    }

    /// Decision table for a physical-anomaly alert:
    /// network suspicion or behavior deviation means attack (escalate the
    /// control pair to the sinkhole); fault evidence without suspicion
    /// means fault (reroute, no escalation); neither means a conservative
    /// suspected attack (quarantine).
    pub fn on_alert(&mut self, alert: &AlertSignal, now: SimTime) -> PnOutcome {
        if alert.kind == AlertKind::Cleared {
            let mut out = PnOutcome::default();
            out.merge(self.clear_flow(self.sensor_flow, now));
            out.merge(self.clear_flow(self.actuation_flow, now));
            return out;
        }
        let control_suspicion = self
            .flows
            .get(&self.sensor_flow)
            .map_or(0, |f| f.suspicion)
            .max(self.flows.get(&self.actuation_flow).map_or(0, |f| f.suspicion));
        let deviation = self.behavior_deviation();
        let deviation_evidence = deviation.is_some_and(|d| d > self.cfg.delta_behavior);
        let fault_evidence = self.fault_evidence_on_path(&self.sensor_flow, now)
            || self.fault_evidence_on_path(&self.actuation_flow, now);

        let mut out = PnOutcome::default();
        let verdict = if control_suspicion > 0 || deviation_evidence {
            out.merge(self.escalate_to(self.sensor_flow, TrafficClass::Malicious, now));
            out.merge(self.escalate_to(self.actuation_flow, TrafficClass::Malicious, now));
            Verdict::Attack
        } else if fault_evidence {
            // reroute both control flows onto the best currently live path
            out.merge(self.assign_and_build(self.sensor_flow, now));
            out.merge(self.assign_and_build(self.actuation_flow, now));
            out.acks.push(MitigationAck {
                action: AckAction::None,
                flow: self.sensor_flow,
                at: now,
            });
            Verdict::Fault
        } else {
            out.merge(self.escalate_to(self.sensor_flow, TrafficClass::Suspicious, now));
            out.merge(self.escalate_to(self.actuation_flow, TrafficClass::Suspicious, now));
            Verdict::AttackSuspected
        };
        out.verdict = Some(VerdictRecord {
            verdict,
            flow: self.sensor_flow,
            at: now,
            suspicion: control_suspicion,
            behavior_deviation: deviation,
            fault_evidence,
        });
        out
    }
}
