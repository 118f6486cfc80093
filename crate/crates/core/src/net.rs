//! Simulated switch fabric: hosts, programmable switches, links, and
//! match-action flow tables.
//!
//! Switches forward per installed rules; a table miss buffers the packet
//! and sends its header to the network controller. Links serialize packets
//! FIFO per direction, so congestion shows up as delay rather than
//! reordering.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{RngStream, SimTime};

pub const MISS_BUFFER_CAPACITY: usize = 64;
pub const MISS_BUFFER_TIMEOUT_US: u64 = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeIdx(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkIdx(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Host,
    Switch,
}

#[derive(Debug, Clone)]
pub struct NodeDef {
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Debug, Clone)]
pub struct LinkDef {
    pub a: NodeIdx,
    pub b: NodeIdx,
    pub latency_us: u64,
    pub bandwidth_bps: u64,
    pub loss_prob: f64,
    /// bounded egress queue: a packet that would wait longer than this
    /// before starting to serialize is tail-dropped
    pub max_queue_us: u64,
}

pub const DEFAULT_MAX_QUEUE_US: u64 = 20_000;

impl LinkDef {
    pub fn peer_of(&self, node: NodeIdx) -> NodeIdx {
        if node == self.a {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("unknown node `{0}` referenced by a link")]
    UnknownNode(String),
    #[error("duplicate node name `{0}`")]
    DuplicateNode(String),
    #[error("duplicate link between `{0}` and `{1}`")]
    DuplicateLink(String, String),
    #[error("link from `{0}` to itself")]
    SelfLink(String),
    #[error("topology is not connected (node `{0}` unreachable)")]
    Disconnected(String),
    #[error("host `{0}` must attach to exactly one switch (has {1} links)")]
    HostDegree(String, usize),
    #[error("link `{key}` is invalid: {reason}")]
    BadLink { key: String, reason: &'static str },
}

/// Static network graph. Port numbers on each node follow the order its
/// links were declared.
#[derive(Debug, Clone)]
pub struct Topology {
    pub nodes: Vec<NodeDef>,
    pub links: Vec<LinkDef>,
    adjacency: Vec<Vec<LinkIdx>>,
}

impl Topology {
    pub fn new(nodes: Vec<NodeDef>, links: Vec<LinkDef>) -> Result<Self, TopologyError> {
        for (i, n) in nodes.iter().enumerate() {
            if nodes[..i].iter().any(|m| m.name == n.name) {
                return Err(TopologyError::DuplicateNode(n.name.clone()));
            }
        }
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (li, link) in links.iter().enumerate() {
            let (a, b) = (link.a.0 as usize, link.b.0 as usize);
            if a >= nodes.len() || b >= nodes.len() {
                return Err(TopologyError::UnknownNode(format!("#{}", a.max(b))));
            }
            if link.a == link.b {
                return Err(TopologyError::SelfLink(nodes[a].name.clone()));
            }
            for prev in &links[..li] {
                let same = (prev.a == link.a && prev.b == link.b)
                    || (prev.a == link.b && prev.b == link.a);
                if same {
                    return Err(TopologyError::DuplicateLink(
                        nodes[a].name.clone(),
                        nodes[b].name.clone(),
                    ));
                }
            }
            if link.bandwidth_bps == 0 {
                return Err(TopologyError::BadLink {
                    key: format!("{}-{}", nodes[a].name, nodes[b].name),
                    reason: "bandwidth must be positive",
                });
            }
            if !(0.0..=1.0).contains(&link.loss_prob) {
                return Err(TopologyError::BadLink {
                    key: format!("{}-{}", nodes[a].name, nodes[b].name),
                    reason: "loss probability must be within [0, 1]",
                });
            }
            adjacency[a].push(LinkIdx(li as u32));
            adjacency[b].push(LinkIdx(li as u32));
        }
        let topo = Topology {
            nodes,
            links,
            adjacency,
        };
        topo.check_connected()?;
        for (i, node) in topo.nodes.iter().enumerate() {
            if node.kind == NodeKind::Host && topo.adjacency[i].len() != 1 {
                return Err(TopologyError::HostDegree(
                    node.name.clone(),
                    topo.adjacency[i].len(),
                ));
            }
        }
        Ok(topo)
    }

    fn check_connected(&self) -> Result<(), TopologyError> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(n) = queue.pop_front() {
            for &li in &self.adjacency[n] {
                let peer = self.links[li.0 as usize].peer_of(NodeIdx(n as u32)).0 as usize;
                if !seen[peer] {
                    seen[peer] = true;
                    queue.push_back(peer);
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(TopologyError::Disconnected(self.nodes[i].name.clone()));
        }
        Ok(())
    }

    pub fn node_index(&self, name: &str) -> Option<NodeIdx> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(|i| NodeIdx(i as u32))
    }

    pub fn node_name(&self, idx: NodeIdx) -> &str {
        &self.nodes[idx.0 as usize].name
    }

    pub fn node_kind(&self, idx: NodeIdx) -> NodeKind {
        self.nodes[idx.0 as usize].kind
    }

    pub fn links_of(&self, node: NodeIdx) -> &[LinkIdx] {
        &self.adjacency[node.0 as usize]
    }

    pub fn link(&self, idx: LinkIdx) -> &LinkDef {
        &self.links[idx.0 as usize]
    }

    /// Port on `node` whose link leads to `peer`, if adjacent.
    pub fn port_toward(&self, node: NodeIdx, peer: NodeIdx) -> Option<PortId> {
        self.adjacency[node.0 as usize]
            .iter()
            .position(|&li| self.links[li.0 as usize].peer_of(node) == peer)
            .map(|p| PortId(p as u16))
    }

    pub fn link_on_port(&self, node: NodeIdx, port: PortId) -> Option<LinkIdx> {
        self.adjacency[node.0 as usize].get(port.0 as usize).copied()
    }

    /// The switch a host hangs off.
    pub fn host_switch(&self, host: NodeIdx) -> Option<NodeIdx> {
        if self.node_kind(host) != NodeKind::Host {
            return None;
        }
        self.adjacency[host.0 as usize]
            .first()
            .map(|&li| self.links[li.0 as usize].peer_of(host))
    }

    pub fn link_between(&self, a: NodeIdx, b: NodeIdx) -> Option<LinkIdx> {
        self.adjacency[a.0 as usize]
            .iter()
            .copied()
            .find(|&li| self.links[li.0 as usize].peer_of(a) == b)
    }

    pub fn switch_indices(&self) -> impl Iterator<Item = NodeIdx> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::Switch)
            .map(|(i, _)| NodeIdx(i as u32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Proto {
    Scada,
    ControlChannel,
    Other,
}

#[derive(Debug, Clone)]
pub struct Packet {
    pub id: u64,
    pub src: NodeIdx,
    pub dst: NodeIdx,
    pub proto: Proto,
    pub label: Option<u16>,
    pub payload: Vec<u8>,
    pub created_at: SimTime,
    pub mirror: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchSpec {
    pub src: Option<NodeIdx>,
    pub dst: Option<NodeIdx>,
    pub proto: Option<Proto>,
    pub label: Option<u16>,
}

impl MatchSpec {
    pub fn matches(&self, packet: &Packet) -> bool {
        self.src.is_none_or(|s| s == packet.src)
            && self.dst.is_none_or(|d| d == packet.dst)
            && self.proto.is_none_or(|p| p == packet.proto)
            && self.label.is_none_or(|l| packet.label == Some(l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Forward(PortId),
    SetLabel(u16),
    MirrorToProbe(NodeIdx),
    Drop,
}

#[derive(Debug, Clone)]
pub struct FlowRule {
    pub id: u64,
    pub priority: i32,
    pub matcher: MatchSpec,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    RuleDrop,
    LinkLoss,
    LinkFailure,
    DownPort,
    MissOverflow,
    MissTimeout,
    NoRoute,
}

#[derive(Debug, Clone, Default, Serialize, PartialEq, Eq)]
pub struct SwitchCounters {
    pub forwarded: u64,
    pub mirrored: u64,
    pub misses: u64,
    pub rule_drops: u64,
    pub down_port_drops: u64,
    pub miss_overflow_drops: u64,
    pub miss_timeout_drops: u64,
    pub removed_missing_rules: u64,
}

/// Outcome of running a packet through a switch table.
#[derive(Debug)]
pub enum SwitchOutcome {
    /// Winning rule's actions, to execute in order on the returned packet.
    Matched {
        rule_id: u64,
        actions: Vec<Action>,
        packet: Packet,
    },
    /// Table miss: packet buffered awaiting a rule; its header goes to the
    /// network controller.
    MissBuffered,
    /// Table miss with a full buffer: packet dropped.
    MissDropped,
}

#[derive(Debug)]
pub struct SwitchState {
    pub idx: NodeIdx,
    rules: Vec<(u64, FlowRule)>, // (installation seq, rule)
    next_install_seq: u64,
    pub miss_buffer: VecDeque<(Packet, SimTime)>,
    pub counters: SwitchCounters,
}

impl SwitchState {
    pub fn new(idx: NodeIdx) -> Self {
        SwitchState {
            idx,
            rules: Vec::new(),
            next_install_seq: 0,
            miss_buffer: VecDeque::new(),
            counters: SwitchCounters::default(),
        }
    }

    pub fn install_rule(&mut self, rule: FlowRule) {
        // reinstalling an id replaces the old rule and counts as newest
        self.rules.retain(|(_, r)| r.id != rule.id);
        let seq = self.next_install_seq;
        self.next_install_seq += 1;
        self.rules.push((seq, rule));
    }

    pub fn remove_rule(&mut self, rule_id: u64) -> bool {
        let before = self.rules.len();
        self.rules.retain(|(_, r)| r.id != rule_id);
        let removed = self.rules.len() != before;
        if !removed {
            self.counters.removed_missing_rules += 1;
        }
        removed
    }

    pub fn rules(&self) -> impl Iterator<Item = &FlowRule> {
        self.rules.iter().map(|(_, r)| r)
    }

    /// Highest-priority matching rule; ties break toward the newest
    /// installation.
    pub fn lookup(&self, packet: &Packet) -> Option<&FlowRule> {
        self.rules
            .iter()
            .filter(|(_, r)| r.matcher.matches(packet))
            .max_by_key(|(seq, r)| (r.priority, *seq))
            .map(|(_, r)| r)
    }

    /// Runs the table. The implicit lowest-priority table-miss entry
    /// buffers the packet for the network controller.
    pub fn process(&mut self, packet: Packet, now: SimTime) -> SwitchOutcome {
        if let Some(rule) = self.lookup(&packet) {
            let actions = rule.actions.clone();
            let rule_id = rule.id;
            self.counters.forwarded += 1;
            return SwitchOutcome::Matched {
                rule_id,
                actions,
                packet,
            };
        }
        self.counters.misses += 1;
        if self.miss_buffer.len() >= MISS_BUFFER_CAPACITY {
            self.counters.miss_overflow_drops += 1;
            return SwitchOutcome::MissDropped;
        }
        self.miss_buffer.push_back((packet, now));
        SwitchOutcome::MissBuffered
    }

    /// Removes a buffered packet by id; used by the miss-timeout event.
    pub fn expire_buffered(&mut self, packet_id: u64) -> Option<Packet> {
        let pos = self.miss_buffer.iter().position(|(p, _)| p.id == packet_id)?;
        self.counters.miss_timeout_drops += 1;
        self.miss_buffer.remove(pos).map(|(p, _)| p)
    }

    /// Drains the miss buffer for re-evaluation after a rule install.
    pub fn drain_buffered(&mut self) -> Vec<Packet> {
        self.miss_buffer.drain(..).map(|(p, _)| p).collect()
    }
}

/// Result of handing a packet to a link for transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransmitOutcome {
    /// Delivery completes at `at` on the peer node.
    Deliver { at: SimTime },
    /// Packet corrupted in flight; it still consumed its serialization slot.
    Lost,
    /// The egress queue was full; the packet never entered the wire.
    QueueDrop,
}

#[derive(Debug)]
pub struct LinkState {
    pub idx: LinkIdx,
    pub up: bool,
    /// Bumped on failure so in-flight deliveries can be recognized as stale.
    pub epoch: u64,
    busy_until: [SimTime; 2],
    pub loss_count: u64,
}

impl LinkState {
    pub fn new(idx: LinkIdx) -> Self {
        LinkState {
            idx,
            up: true,
            epoch: 0,
            busy_until: [SimTime::ZERO; 2],
            loss_count: 0,
        }
    }

    pub fn fail(&mut self) {
        self.up = false;
        self.epoch += 1;
        self.busy_until = [SimTime::ZERO; 2];
    }

    pub fn restore(&mut self, now: SimTime) {
        self.up = true;
        self.busy_until = [now; 2];
    }

    /// Serialization time for `bytes`, in whole microseconds (rounded up).
    pub fn serialization_us(def: &LinkDef, bytes: usize) -> u64 {
        let bits = bytes as u128 * 8;
        (bits * 1_000_000).div_ceil(def.bandwidth_bps as u128) as u64
    }

    /// FIFO transmission toward `def.peer_of(from)`: a packet starts
    /// serializing only after the previous one on this direction finishes.
    pub fn transmit(
        &mut self,
        def: &LinkDef,
        from: NodeIdx,
        now: SimTime,
        bytes: usize,
        rng: &mut RngStream,
    ) -> TransmitOutcome {
        debug_assert!(self.up);
        let dir = usize::from(from != def.a);
        let wait = self.busy_until[dir].saturating_sub(now);
        if wait > def.max_queue_us {
            return TransmitOutcome::QueueDrop;
        }
        let start = self.busy_until[dir].max(now);
        let done = start.add_micros(Self::serialization_us(def, bytes));
        self.busy_until[dir] = done;
        // degenerate probabilities skip the draw so that loss-free links
        // never consume randomness
        let lost = if def.loss_prob >= 1.0 {
            true
        } else if def.loss_prob <= 0.0 {
            false
        } else {
            rng.random::<f64>() < def.loss_prob
        };
        if lost {
            self.loss_count += 1;
            TransmitOutcome::Lost
        } else {
            TransmitOutcome::Deliver {
                at: done.add_micros(def.latency_us),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::derive_rng;

    fn line_topology() -> Topology {
        let nodes = vec![
            NodeDef { name: "h1".into(), kind: NodeKind::Host },
            NodeDef { name: "s1".into(), kind: NodeKind::Switch },
            NodeDef { name: "s2".into(), kind: NodeKind::Switch },
            NodeDef { name: "h2".into(), kind: NodeKind::Host },
        ];
        let links = vec![
            LinkDef { a: NodeIdx(0), b: NodeIdx(1), latency_us: 100, bandwidth_bps: 1_000_000, loss_prob: 0.0, max_queue_us: 20_000 },
            LinkDef { a: NodeIdx(1), b: NodeIdx(2), latency_us: 1000, bandwidth_bps: 1_000_000, loss_prob: 0.0, max_queue_us: 20_000 },
            LinkDef { a: NodeIdx(2), b: NodeIdx(3), latency_us: 100, bandwidth_bps: 1_000_000, loss_prob: 0.0, max_queue_us: 20_000 },
        ];
        Topology::new(nodes, links).unwrap()
    }

    fn packet(id: u64, src: u32, dst: u32) -> Packet {
        Packet {
            id,
            src: NodeIdx(src),
            dst: NodeIdx(dst),
            proto: Proto::Scada,
            label: None,
            payload: vec![0; 16],
            created_at: SimTime::ZERO,
            mirror: false,
        }
    }

    #[test]
    fn serialization_plus_propagation() {
        // 125 bytes at 1 Mbit/s is 1000 us on the wire, plus 1000 us latency
        let def = LinkDef {
            a: NodeIdx(0),
            b: NodeIdx(1),
            latency_us: 1000,
            bandwidth_bps: 1_000_000,
            loss_prob: 0.0,
            max_queue_us: 20_000,
        };
        let mut link = LinkState::new(LinkIdx(0));
        let mut rng = derive_rng(1, "link");
        match link.transmit(&def, NodeIdx(0), SimTime::ZERO, 125, &mut rng) {
            TransmitOutcome::Deliver { at } => assert_eq!(at.micros(), 2000),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn certain_loss_never_delivers() {
        let def = LinkDef {
            a: NodeIdx(0),
            b: NodeIdx(1),
            latency_us: 10,
            bandwidth_bps: 8_000_000,
            loss_prob: 1.0,
            max_queue_us: 20_000,
        };
        let mut link = LinkState::new(LinkIdx(0));
        let mut rng = derive_rng(2, "link");
        for _ in 0..100 {
            assert_eq!(
                link.transmit(&def, NodeIdx(0), SimTime::ZERO, 64, &mut rng),
                TransmitOutcome::Lost
            );
        }
    }

    #[test]
    fn zero_loss_is_fifo_and_lossless() {
        let def = LinkDef {
            a: NodeIdx(0),
            b: NodeIdx(1),
            latency_us: 500,
            bandwidth_bps: 1_000_000,
            loss_prob: 0.0,
            max_queue_us: u64::MAX, // unbounded queue for this test
        };
        let mut link = LinkState::new(LinkIdx(0));
        let mut rng = derive_rng(3, "link");
        let mut last = SimTime::ZERO;
        for i in 0..10_000u64 {
            let now = SimTime::from_micros(i); // arrivals faster than the wire drains
            match link.transmit(&def, NodeIdx(0), now, 100, &mut rng) {
                TransmitOutcome::Deliver { at } => {
                    assert!(at > last, "FIFO violated at packet {i}");
                    last = at;
                }
                other => panic!("unexpected {other:?} without loss probability"),
            }
        }
    }

    #[test]
    fn full_queue_tail_drops() {
        let def = LinkDef {
            a: NodeIdx(0),
            b: NodeIdx(1),
            latency_us: 0,
            bandwidth_bps: 1_000_000, // 1000 us per 125-byte packet
            loss_prob: 0.0,
            max_queue_us: 2_500,
        };
        let mut link = LinkState::new(LinkIdx(0));
        let mut rng = derive_rng(5, "link");
        let mut delivered = 0;
        let mut dropped = 0;
        for _ in 0..10 {
            match link.transmit(&def, NodeIdx(0), SimTime::ZERO, 125, &mut rng) {
                TransmitOutcome::Deliver { .. } => delivered += 1,
                TransmitOutcome::QueueDrop => dropped += 1,
                TransmitOutcome::Lost => unreachable!(),
            }
        }
        // 0, 1000 and 2000 us of waiting fit under the 2500 us bound
        assert_eq!(delivered, 3);
        assert_eq!(dropped, 7);
    }

    #[test]
    fn directions_serialize_independently() {
        let def = LinkDef {
            a: NodeIdx(0),
            b: NodeIdx(1),
            latency_us: 0,
            bandwidth_bps: 8_000_000,
            loss_prob: 0.0,
            max_queue_us: 20_000,
        };
        let mut link = LinkState::new(LinkIdx(0));
        let mut rng = derive_rng(4, "link");
        let fwd = link.transmit(&def, NodeIdx(0), SimTime::ZERO, 1000, &mut rng);
        let rev = link.transmit(&def, NodeIdx(1), SimTime::ZERO, 1000, &mut rng);
        assert_eq!(fwd, rev); // full duplex: same timing both ways
    }

    #[test]
    fn miss_path_buffers_and_overflows() {
        let mut sw = SwitchState::new(NodeIdx(1));
        for i in 0..MISS_BUFFER_CAPACITY as u64 {
            assert!(matches!(
                sw.process(packet(i, 0, 3), SimTime::ZERO),
                SwitchOutcome::MissBuffered
            ));
        }
        assert!(matches!(
            sw.process(packet(999, 0, 3), SimTime::ZERO),
            SwitchOutcome::MissDropped
        ));
        assert_eq!(sw.counters.miss_overflow_drops, 1);
    }

    #[test]
    fn single_match_forwards() {
        let mut sw = SwitchState::new(NodeIdx(1));
        sw.install_rule(FlowRule {
            id: 1,
            priority: 10,
            matcher: MatchSpec {
                dst: Some(NodeIdx(3)),
                ..Default::default()
            },
            actions: vec![Action::Forward(PortId(2))],
        });
        match sw.process(packet(1, 0, 3), SimTime::ZERO) {
            SwitchOutcome::Matched { actions, packet, .. } => {
                assert_eq!(actions, vec![Action::Forward(PortId(2))]);
                assert_eq!(packet.id, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn priority_order_wins() {
        let mut sw = SwitchState::new(NodeIdx(1));
        sw.install_rule(FlowRule {
            id: 1,
            priority: 5,
            matcher: MatchSpec::default(),
            actions: vec![Action::Forward(PortId(0))],
        });
        sw.install_rule(FlowRule {
            id: 2,
            priority: 10,
            matcher: MatchSpec::default(),
            actions: vec![Action::Drop],
        });
        match sw.process(packet(1, 0, 3), SimTime::ZERO) {
            SwitchOutcome::Matched { rule_id, actions, .. } => {
                assert_eq!(rule_id, 2);
                assert_eq!(actions, vec![Action::Drop]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn priority_tie_breaks_to_newest() {
        let mut sw = SwitchState::new(NodeIdx(1));
        for id in [1, 2] {
            sw.install_rule(FlowRule {
                id,
                priority: 5,
                matcher: MatchSpec::default(),
                actions: vec![Action::Forward(PortId(id as u16))],
            });
        }
        match sw.process(packet(1, 0, 3), SimTime::ZERO) {
            SwitchOutcome::Matched { rule_id, .. } => assert_eq!(rule_id, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn remove_missing_rule_is_noop_with_warning() {
        let mut sw = SwitchState::new(NodeIdx(1));
        assert!(!sw.remove_rule(42));
        assert_eq!(sw.counters.removed_missing_rules, 1);
    }

    #[test]
    fn buffered_packets_drain_for_reevaluation() {
        let mut sw = SwitchState::new(NodeIdx(1));
        sw.process(packet(1, 0, 3), SimTime::ZERO);
        sw.process(packet(2, 0, 3), SimTime::ZERO);
        let drained = sw.drain_buffered();
        assert_eq!(drained.iter().map(|p| p.id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(sw.miss_buffer.is_empty());
    }

    #[test]
    fn expire_buffered_by_id() {
        let mut sw = SwitchState::new(NodeIdx(1));
        sw.process(packet(1, 0, 3), SimTime::ZERO);
        assert!(sw.expire_buffered(1).is_some());
        assert!(sw.expire_buffered(1).is_none());
        assert_eq!(sw.counters.miss_timeout_drops, 1);
    }

    #[test]
    fn topology_lookup_helpers() {
        let t = line_topology();
        assert_eq!(t.host_switch(NodeIdx(0)), Some(NodeIdx(1)));
        assert_eq!(t.port_toward(NodeIdx(1), NodeIdx(2)), Some(PortId(1)));
        assert_eq!(t.port_toward(NodeIdx(1), NodeIdx(3)), None);
        assert!(t.link_between(NodeIdx(1), NodeIdx(2)).is_some());
    }

    #[test]
    fn disconnected_topology_rejected() {
        let nodes = vec![
            NodeDef { name: "h1".into(), kind: NodeKind::Host },
            NodeDef { name: "s1".into(), kind: NodeKind::Switch },
            NodeDef { name: "s2".into(), kind: NodeKind::Switch },
        ];
        let result = Topology::new(
            nodes,
            vec![LinkDef {
                a: NodeIdx(0),
                b: NodeIdx(1),
                latency_us: 1,
                bandwidth_bps: 1,
                loss_prob: 0.0,
            max_queue_us: 20_000,
            }],
        );
        assert!(matches!(result, Err(TopologyError::Disconnected(_))));
    }

    #[test]
    fn link_failure_bumps_epoch() {
        let mut link = LinkState::new(LinkIdx(0));
        assert_eq!(link.epoch, 0);
        link.fail();
        assert!(!link.up);
        assert_eq!(link.epoch, 1);
        link.restore(SimTime::from_micros(500));
        assert!(link.up);
    }
}
