//! Attack injectors. Replay, false-data injection, and man-in-the-middle
//! rewrites run as interceptors inline at a single compromised switch, so
//! honest-path code stays attack-agnostic; denial-of-service floods are
//! injected at a source host by the scenario driver.
//!
//! Every interceptor is confined to its `[start, stop)` window; outside it
//! the compromised switch behaves exactly like an honest one.

use serde::{Deserialize, Serialize};

use crate::net::{NodeIdx, Packet, Proto};
use crate::pnctrl::FlowKey;
use crate::scada::{decode_frame, encode_frame, FrameBody, RegisterCodec, ScadaFrame};
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKindName {
    Replay,
    FalseDataInjection,
    MitmRewrite,
    DosFlood,
}

/// Kind-specific attack parameters (resolved form; the config layer maps
/// node names to indices).
#[derive(Debug, Clone)]
pub enum AttackKind {
    /// Record the last `record_frames` sensor frames seen before `start`,
    /// then substitute them cyclically for live sensor frames.
    Replay {
        record_frames: usize,
        preserve_transaction_ids: bool,
    },
    /// Add `bias` to the unpacked sensor measurements.
    FalseDataInjection { bias: Vec<f64> },
    /// Scale actuation commands by `scale`.
    MitmRewrite { scale: f64 },
    /// Inject `rate_pps` junk packets per second toward `target`.
    DosFlood {
        rate_pps: u64,
        frame_bytes: usize,
        target: NodeIdx,
    },
}

impl AttackKind {
    pub fn name(&self) -> AttackKindName {
        match self {
            AttackKind::Replay { .. } => AttackKindName::Replay,
            AttackKind::FalseDataInjection { .. } => AttackKindName::FalseDataInjection,
            AttackKind::MitmRewrite { .. } => AttackKindName::MitmRewrite,
            AttackKind::DosFlood { .. } => AttackKindName::DosFlood,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub start: SimTime,
    pub stop: SimTime,
    /// Compromised switch for interceptor attacks; flood source host for
    /// denial of service.
    pub locus: NodeIdx,
}

impl AttackSpec {
    /// An identity attack changes nothing observable: zero bias, unit
    /// scale, zero flood rate, or an empty activity window. Identity
    /// attacks are excluded from ground truth.
    pub fn is_identity(&self) -> bool {
        if self.start >= self.stop {
            return true;
        }
        match &self.kind {
            AttackKind::FalseDataInjection { bias } => bias.iter().all(|b| *b == 0.0),
            AttackKind::MitmRewrite { scale } => *scale == 1.0,
            AttackKind::DosFlood { rate_pps, .. } => *rate_pps == 0,
            AttackKind::Replay { .. } => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterceptOutcome {
    Pass,
    Modified,
    Dropped,
}

/// Recorded sensor frames with a cyclic cursor.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    frames: Vec<Vec<u8>>,
    cursor: usize,
}

impl ReplayBuffer {
    fn record(&mut self, payload: &[u8], capacity: usize) {
        if capacity == 0 {
            return;
        }
        if self.frames.len() == capacity {
            self.frames.remove(0);
        }
        self.frames.push(payload.to_vec());
    }

    fn next(&mut self) -> Option<Vec<u8>> {
        if self.frames.is_empty() {
            return None;
        }
        let frame = self.frames[self.cursor % self.frames.len()].clone();
        self.cursor += 1;
        Some(frame)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Inline packet interceptor at the compromised switch.
#[derive(Debug)]
pub struct Interceptor {
    pub spec: AttackSpec,
    sensor_flow: FlowKey,
    actuation_flow: FlowKey,
    codec: RegisterCodec,
    replay: ReplayBuffer,
    pub degenerate_drops: u64,
    pub clamped_writes: u64,
    pub modified: u64,
}

impl Interceptor {
    pub fn new(spec: AttackSpec, sensor_flow: FlowKey, actuation_flow: FlowKey, codec: RegisterCodec) -> Self {
        Interceptor {
            spec,
            sensor_flow,
            actuation_flow,
            codec,
            replay: ReplayBuffer::default(),
            degenerate_drops: 0,
            clamped_writes: 0,
            modified: 0,
        }
    }

    pub fn active(&self, now: SimTime) -> bool {
        self.spec.start <= now && now < self.spec.stop
    }

    fn flow_of(packet: &Packet) -> FlowKey {
        FlowKey {
            src: packet.src,
            dst: packet.dst,
            proto: packet.proto,
        }
    }

    /// Runs the interceptor over a packet transiting the compromised
    /// switch. Outside the attack window this only records (for replay) and
    /// always passes the packet through untouched.
    pub fn observe_and_apply(&mut self, packet: &mut Packet, now: SimTime) -> InterceptOutcome {
        if packet.proto != Proto::Scada {
            return InterceptOutcome::Pass;
        }
        let flow = Self::flow_of(packet);
        match &self.spec.kind {
            AttackKind::Replay {
                record_frames,
                preserve_transaction_ids,
            } => {
                if flow != self.sensor_flow {
                    return InterceptOutcome::Pass;
                }
                let Ok(frame) = decode_frame(&packet.payload) else {
                    return InterceptOutcome::Pass;
                };
                if !matches!(frame.body, FrameBody::ReadHoldingRegistersResponse { .. }) {
                    return InterceptOutcome::Pass;
                }
                if now < self.spec.start {
                    self.replay.record(&packet.payload, *record_frames);
                    return InterceptOutcome::Pass;
                }
                if !self.active(now) {
                    return InterceptOutcome::Pass;
                }
                match self.replay.next() {
                    Some(recorded) => {
                        let replacement = if *preserve_transaction_ids {
                            recorded
                        } else {
                            match decode_frame(&recorded) {
                                Ok(mut rec) => {
                                    rec.transaction_id = frame.transaction_id;
                                    encode_frame(&rec).unwrap_or(recorded)
                                }
                                Err(_) => recorded,
                            }
                        };
                        packet.payload = replacement;
                        self.modified += 1;
                        InterceptOutcome::Modified
                    }
                    None => {
                        // nothing recorded: the substitution degenerates to
                        // suppressing the live frame
                        self.degenerate_drops += 1;
                        InterceptOutcome::Dropped
                    }
                }
            }
            AttackKind::FalseDataInjection { bias } => {
                if !self.active(now) || flow != self.sensor_flow {
                    return InterceptOutcome::Pass;
                }
                let Ok(frame) = decode_frame(&packet.payload) else {
                    return InterceptOutcome::Pass;
                };
                let FrameBody::ReadHoldingRegistersResponse { values } = &frame.body else {
                    return InterceptOutcome::Pass;
                };
                let Ok(mut readings) = self.codec.unpack_measurement(values) else {
                    return InterceptOutcome::Pass;
                };
                for (i, r) in readings.iter_mut().enumerate() {
                    *r += bias.get(i).copied().unwrap_or(0.0);
                }
                let packed = match self.codec.pack_measurement(&readings) {
                    Ok(p) => p,
                    Err(_) => {
                        // bias pushed a register out of range: clamp to the
                        // codec limits and log the clamp
                        self.clamped_writes += 1;
                        let lo = self.codec.offset;
                        let hi = self.codec.offset
                            + self.codec.scale
                                * if self.codec.registers_per_value == 1 {
                                    u16::MAX as f64
                                } else {
                                    u32::MAX as f64
                                };
                        for r in readings.iter_mut() {
                            *r = r.clamp(lo, hi);
                        }
                        self.codec
                            .pack_measurement(&readings)
                            .expect("clamped values are representable")
                    }
                };
                let rewritten = ScadaFrame {
                    transaction_id: frame.transaction_id,
                    unit_id: frame.unit_id,
                    body: FrameBody::ReadHoldingRegistersResponse { values: packed },
                };
                packet.payload = encode_frame(&rewritten).expect("valid rewrite");
                self.modified += 1;
                InterceptOutcome::Modified
            }
            AttackKind::MitmRewrite { scale } => {
                if !self.active(now) || flow != self.actuation_flow {
                    return InterceptOutcome::Pass;
                }
                let Ok(frame) = decode_frame(&packet.payload) else {
                    return InterceptOutcome::Pass;
                };
                let FrameBody::WriteMultipleRegistersRequest {
                    start_address,
                    values,
                } = &frame.body
                else {
                    return InterceptOutcome::Pass;
                };
                let Ok(mut commands) = self.codec.unpack_measurement(values) else {
                    return InterceptOutcome::Pass;
                };
                for c in commands.iter_mut() {
                    *c *= scale;
                }
                let Ok(packed) = self.codec.pack_measurement(&commands) else {
                    return InterceptOutcome::Pass;
                };
                let rewritten = ScadaFrame {
                    transaction_id: frame.transaction_id,
                    unit_id: frame.unit_id,
                    body: FrameBody::WriteMultipleRegistersRequest {
                        start_address: *start_address,
                        values: packed,
                    },
                };
                packet.payload = encode_frame(&rewritten).expect("valid rewrite");
                self.modified += 1;
                InterceptOutcome::Modified
            }
            AttackKind::DosFlood { .. } => InterceptOutcome::Pass,
        }
    }
}

/// Interval between flood packets, in whole microseconds.
pub fn flood_interval_us(rate_pps: u64) -> Option<u64> {
    if rate_pps == 0 {
        return None;
    }
    Some((1_000_000 / rate_pps).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn sensor_flow() -> FlowKey {
        FlowKey {
            src: NodeIdx(0),
            dst: NodeIdx(1),
            proto: Proto::Scada,
        }
    }

    fn actuation_flow() -> FlowKey {
        FlowKey {
            src: NodeIdx(1),
            dst: NodeIdx(0),
            proto: Proto::Scada,
        }
    }

    fn sensor_packet(txn: u16, value: f64) -> Packet {
        let codec = RegisterCodec::default();
        let frame = ScadaFrame {
            transaction_id: txn,
            unit_id: 1,
            body: FrameBody::ReadHoldingRegistersResponse {
                values: codec
                    .pack_measurement(&DVector::from_element(1, value))
                    .unwrap(),
            },
        };
        Packet {
            id: txn as u64,
            src: NodeIdx(0),
            dst: NodeIdx(1),
            proto: Proto::Scada,
            label: None,
            payload: encode_frame(&frame).unwrap(),
            created_at: SimTime::ZERO,
            mirror: false,
        }
    }

    fn actuation_packet(txn: u16, value: f64) -> Packet {
        let codec = RegisterCodec::default();
        let frame = ScadaFrame {
            transaction_id: txn,
            unit_id: 1,
            body: FrameBody::WriteMultipleRegistersRequest {
                start_address: 0,
                values: codec
                    .pack_measurement(&DVector::from_element(1, value))
                    .unwrap(),
            },
        };
        Packet {
            id: txn as u64,
            src: NodeIdx(1),
            dst: NodeIdx(0),
            proto: Proto::Scada,
            label: None,
            payload: encode_frame(&frame).unwrap(),
            created_at: SimTime::ZERO,
            mirror: false,
        }
    }

    fn decode_sensor_value(packet: &Packet) -> (u16, f64) {
        let frame = decode_frame(&packet.payload).unwrap();
        let FrameBody::ReadHoldingRegistersResponse { values } = frame.body else {
            panic!("not a sensor frame");
        };
        let v = RegisterCodec::default().unpack_measurement(&values).unwrap();
        (frame.transaction_id, v[0])
    }

    fn replay_interceptor(record: usize, preserve: bool) -> Interceptor {
        Interceptor::new(
            AttackSpec {
                kind: AttackKind::Replay {
                    record_frames: record,
                    preserve_transaction_ids: preserve,
                },
                start: SimTime::from_micros(1000),
                stop: SimTime::from_micros(9000),
                locus: NodeIdx(6),
            },
            sensor_flow(),
            actuation_flow(),
            RegisterCodec::default(),
        )
    }

    #[test]
    fn replay_substitutes_recording_cyclically() {
        let mut it = replay_interceptor(3, false);
        // record three frames before the window
        for (i, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            let mut p = sensor_packet(i as u16, *v);
            assert_eq!(
                it.observe_and_apply(&mut p, SimTime::from_micros(i as u64)),
                InterceptOutcome::Pass
            );
        }
        // live frames during the window come back as the recording
        let mut got = Vec::new();
        for i in 0..7u16 {
            let mut p = sensor_packet(100 + i, 9.9);
            assert_eq!(
                it.observe_and_apply(&mut p, SimTime::from_micros(2000)),
                InterceptOutcome::Modified
            );
            let (txn, v) = decode_sensor_value(&p);
            assert_eq!(txn, 100 + i, "transaction ids re-stamped from live frames");
            got.push(v);
        }
        let expected = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0];
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-3, "got {g}, expected {e}");
        }
    }

    #[test]
    fn replay_preserve_flag_keeps_recorded_ids() {
        let mut it = replay_interceptor(2, true);
        for (i, v) in [1.0, 2.0].iter().enumerate() {
            let mut p = sensor_packet(i as u16, *v);
            it.observe_and_apply(&mut p, SimTime::from_micros(i as u64));
        }
        let mut p = sensor_packet(500, 9.9);
        it.observe_and_apply(&mut p, SimTime::from_micros(2000));
        let (txn, _) = decode_sensor_value(&p);
        assert_eq!(txn, 0, "recorded transaction id visible to probes");
    }

    #[test]
    fn replay_with_empty_recording_drops() {
        let mut it = replay_interceptor(3, false);
        let mut p = sensor_packet(1, 5.0);
        assert_eq!(
            it.observe_and_apply(&mut p, SimTime::from_micros(2000)),
            InterceptOutcome::Dropped
        );
        assert_eq!(it.degenerate_drops, 1);
    }

    #[test]
    fn replay_inactive_outside_window() {
        let mut it = replay_interceptor(3, false);
        for i in 0..3u16 {
            let mut p = sensor_packet(i, 1.0);
            it.observe_and_apply(&mut p, SimTime::from_micros(i as u64));
        }
        let mut p = sensor_packet(50, 7.0);
        assert_eq!(
            it.observe_and_apply(&mut p, SimTime::from_micros(9000)),
            InterceptOutcome::Pass
        );
        let (_, v) = decode_sensor_value(&p);
        assert!((v - 7.0).abs() < 1e-3);
    }

    fn fdi_interceptor(bias: f64) -> Interceptor {
        Interceptor::new(
            AttackSpec {
                kind: AttackKind::FalseDataInjection { bias: vec![bias] },
                start: SimTime::ZERO,
                stop: SimTime::from_micros(10_000),
                locus: NodeIdx(6),
            },
            sensor_flow(),
            actuation_flow(),
            RegisterCodec::default(),
        )
    }

    #[test]
    fn zero_bias_is_byte_identical() {
        let mut it = fdi_interceptor(0.0);
        let mut p = sensor_packet(3, 1.25);
        let original = p.payload.clone();
        it.observe_and_apply(&mut p, SimTime::from_micros(5));
        assert_eq!(p.payload, original);
        assert!(it.spec.is_identity());
    }

    #[test]
    fn bias_shifts_readings() {
        let mut it = fdi_interceptor(2.5);
        let mut p = sensor_packet(3, 1.0);
        assert_eq!(
            it.observe_and_apply(&mut p, SimTime::from_micros(5)),
            InterceptOutcome::Modified
        );
        let (_, v) = decode_sensor_value(&p);
        assert!((v - 3.5).abs() < 1e-3);
    }

    #[test]
    fn oversized_bias_clamps_and_logs() {
        let mut it = fdi_interceptor(1e6);
        let mut p = sensor_packet(3, 1.0);
        it.observe_and_apply(&mut p, SimTime::from_micros(5));
        assert_eq!(it.clamped_writes, 1);
        let (_, v) = decode_sensor_value(&p);
        assert!(v > 32.0, "clamped to codec ceiling, got {v}");
    }

    #[test]
    fn mitm_scales_actuation() {
        let mut it = Interceptor::new(
            AttackSpec {
                kind: AttackKind::MitmRewrite { scale: 0.0 },
                start: SimTime::ZERO,
                stop: SimTime::from_micros(10_000),
                locus: NodeIdx(6),
            },
            sensor_flow(),
            actuation_flow(),
            RegisterCodec::default(),
        );
        let mut p = actuation_packet(9, -1.75);
        assert_eq!(
            it.observe_and_apply(&mut p, SimTime::from_micros(5)),
            InterceptOutcome::Modified
        );
        let frame = decode_frame(&p.payload).unwrap();
        let FrameBody::WriteMultipleRegistersRequest { values, .. } = frame.body else {
            panic!("not an actuation frame");
        };
        let v = RegisterCodec::default().unpack_measurement(&values).unwrap();
        assert!(v[0].abs() < 1e-3, "actuation nulled, got {}", v[0]);
    }

    #[test]
    fn unit_scale_mitm_is_identity() {
        let spec = AttackSpec {
            kind: AttackKind::MitmRewrite { scale: 1.0 },
            start: SimTime::ZERO,
            stop: SimTime::from_micros(10),
            locus: NodeIdx(6),
        };
        assert!(spec.is_identity());
        let mut it = Interceptor::new(spec, sensor_flow(), actuation_flow(), RegisterCodec::default());
        let mut p = actuation_packet(9, -1.75);
        let original = p.payload.clone();
        it.observe_and_apply(&mut p, SimTime::from_micros(5));
        assert_eq!(p.payload, original);
    }

    #[test]
    fn flood_interval_arithmetic() {
        assert_eq!(flood_interval_us(0), None);
        assert_eq!(flood_interval_us(1000), Some(1000));
        assert_eq!(flood_interval_us(2_000_000), Some(1));
    }

    #[test]
    fn zero_rate_flood_is_identity() {
        let spec = AttackSpec {
            kind: AttackKind::DosFlood {
                rate_pps: 0,
                frame_bytes: 125,
                target: NodeIdx(1),
            },
            start: SimTime::ZERO,
            stop: SimTime::from_micros(1000),
            locus: NodeIdx(2),
        };
        assert!(spec.is_identity());
    }
}
