//! SCADA application framing carried inside simulated packets.
//!
//! The wire layout follows the Modbus/TCP application-data-unit convention:
//! a 7-byte header (transaction id, protocol id = 0, length, unit id)
//! followed by the function code and body, all big-endian. Checksums are
//! omitted; integrity is the transport's problem, which is precisely the
//! attack surface the network layer has to cover.

use nalgebra::DVector;
use thiserror::Error;

pub const MAX_REGISTERS: usize = 123;

const FC_READ_HOLDING: u8 = 0x03;
const FC_WRITE_MULTIPLE: u8 = 0x10;
const EXCEPTION_BIT: u8 = 0x80;

/// Function-specific portion of a frame.
///
/// Read responses push sensor readings, write requests carry actuation
/// commands; the remaining variants exist for completeness of the dialogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameBody {
    ReadHoldingRegistersRequest { start_address: u16, quantity: u16 },
    ReadHoldingRegistersResponse { values: Vec<u16> },
    WriteMultipleRegistersRequest { start_address: u16, values: Vec<u16> },
    WriteMultipleRegistersResponse { start_address: u16, quantity: u16 },
    ExceptionResponse { function: u8, code: u8 },
}

impl FrameBody {
    pub fn function_name(&self) -> &'static str {
        match self {
            FrameBody::ReadHoldingRegistersRequest { .. } => "read-holding-registers-request",
            FrameBody::ReadHoldingRegistersResponse { .. } => "read-holding-registers-response",
            FrameBody::WriteMultipleRegistersRequest { .. } => "write-multiple-registers-request",
            FrameBody::WriteMultipleRegistersResponse { .. } => "write-multiple-registers-response",
            FrameBody::ExceptionResponse { .. } => "exception-response",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScadaFrame {
    pub transaction_id: u16,
    pub unit_id: u8,
    pub body: FrameBody,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("register count {count} outside [1, {MAX_REGISTERS}]")]
    RegisterCount { count: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("buffer too short at offset {at}")]
    ShortBuffer { at: usize },
    #[error("nonzero protocol id {got:#06x}")]
    NonzeroProtocolId { got: u16 },
    #[error("length field {declared} does not match actual {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown function code {code:#04x} at offset {at}")]
    UnknownFunction { code: u8, at: usize },
    #[error("register/byte count inconsistent at offset {at}: {reason}")]
    CountMismatch { reason: &'static str, at: usize },
}

impl DecodeError {
    /// Compact tag used by probes when counting malformed-frame evidence.
    pub fn tag(&self) -> &'static str {
        match self {
            DecodeError::ShortBuffer { .. } => "short-buffer",
            DecodeError::NonzeroProtocolId { .. } => "protocol-id",
            DecodeError::LengthMismatch { .. } => "length-mismatch",
            DecodeError::UnknownFunction { .. } => "unknown-function",
            DecodeError::CountMismatch { .. } => "count-mismatch",
        }
    }
}

fn check_count(count: usize) -> Result<(), EncodeError> {
    if count == 0 || count > MAX_REGISTERS {
        return Err(EncodeError::RegisterCount { count });
    }
    Ok(())
}

/// Encodes a frame into its byte sequence. The length field covers
/// unit id, function code and body.
pub fn encode_frame(frame: &ScadaFrame) -> Result<Vec<u8>, EncodeError> {
    let mut pdu: Vec<u8> = Vec::with_capacity(8);
    match &frame.body {
        FrameBody::ReadHoldingRegistersRequest {
            start_address,
            quantity,
        } => {
            check_count(*quantity as usize)?;
            pdu.push(FC_READ_HOLDING);
            pdu.extend_from_slice(&start_address.to_be_bytes());
            pdu.extend_from_slice(&quantity.to_be_bytes());
        }
        FrameBody::ReadHoldingRegistersResponse { values } => {
            check_count(values.len())?;
            pdu.push(FC_READ_HOLDING);
            pdu.push((values.len() * 2) as u8);
            for v in values {
                pdu.extend_from_slice(&v.to_be_bytes());
            }
        }
        FrameBody::WriteMultipleRegistersRequest {
            start_address,
            values,
        } => {
            check_count(values.len())?;
            pdu.push(FC_WRITE_MULTIPLE);
            pdu.extend_from_slice(&start_address.to_be_bytes());
            pdu.extend_from_slice(&(values.len() as u16).to_be_bytes());
            pdu.push((values.len() * 2) as u8);
            for v in values {
                pdu.extend_from_slice(&v.to_be_bytes());
            }
        }
        FrameBody::WriteMultipleRegistersResponse {
            start_address,
            quantity,
        } => {
            check_count(*quantity as usize)?;
            pdu.push(FC_WRITE_MULTIPLE);
            pdu.extend_from_slice(&start_address.to_be_bytes());
            pdu.extend_from_slice(&quantity.to_be_bytes());
        }
        FrameBody::ExceptionResponse { function, code } => {
            pdu.push(function | EXCEPTION_BIT);
            pdu.push(*code);
        }
    }
    let mut out = Vec::with_capacity(7 + pdu.len());
    out.extend_from_slice(&frame.transaction_id.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes()); // protocol id
    out.extend_from_slice(&((pdu.len() + 1) as u16).to_be_bytes());
    out.push(frame.unit_id);
    out.extend_from_slice(&pdu);
    Ok(out)
}

fn read_u16(buf: &[u8], at: usize) -> Result<u16, DecodeError> {
    if buf.len() < at + 2 {
        return Err(DecodeError::ShortBuffer { at: buf.len() });
    }
    Ok(u16::from_be_bytes([buf[at], buf[at + 1]]))
}

/// Decodes an arbitrary byte sequence into a frame or a structured error
/// naming the offending offset. Never panics on any input.
pub fn decode_frame(buf: &[u8]) -> Result<ScadaFrame, DecodeError> {
    let transaction_id = read_u16(buf, 0)?;
    let protocol_id = read_u16(buf, 2)?;
    if protocol_id != 0 {
        return Err(DecodeError::NonzeroProtocolId { got: protocol_id });
    }
    let declared = read_u16(buf, 4)? as usize;
    if buf.len() < 7 {
        return Err(DecodeError::ShortBuffer { at: buf.len() });
    }
    let actual = buf.len() - 6;
    if declared != actual {
        return Err(DecodeError::LengthMismatch { declared, actual });
    }
    if declared < 2 {
        return Err(DecodeError::ShortBuffer { at: buf.len() });
    }
    let unit_id = buf[6];
    let function = buf[7];
    let body = &buf[8..];
    let parsed = match function {
        FC_READ_HOLDING => match body.len() {
            // request: start address + quantity
            4 => {
                let start_address = read_u16(body, 0).map_err(|_| unreachable_short())?;
                let quantity = u16::from_be_bytes([body[2], body[3]]);
                if quantity == 0 || quantity as usize > MAX_REGISTERS {
                    return Err(DecodeError::CountMismatch {
                        reason: "read quantity outside protocol bounds",
                        at: 10,
                    });
                }
                FrameBody::ReadHoldingRegistersRequest {
                    start_address,
                    quantity,
                }
            }
            // response: byte count + registers
            n if n >= 1 => {
                let byte_count = body[0] as usize;
                if byte_count != n - 1 || !byte_count.is_multiple_of(2) {
                    return Err(DecodeError::CountMismatch {
                        reason: "response byte count does not match register payload",
                        at: 8,
                    });
                }
                let count = byte_count / 2;
                if count == 0 || count > MAX_REGISTERS {
                    return Err(DecodeError::CountMismatch {
                        reason: "register count outside protocol bounds",
                        at: 8,
                    });
                }
                let values = (0..count)
                    .map(|i| u16::from_be_bytes([body[1 + 2 * i], body[2 + 2 * i]]))
                    .collect();
                FrameBody::ReadHoldingRegistersResponse { values }
            }
            _ => return Err(DecodeError::ShortBuffer { at: buf.len() }),
        },
        FC_WRITE_MULTIPLE => match body.len() {
            // response echo: start address + quantity
            4 => {
                let start_address = u16::from_be_bytes([body[0], body[1]]);
                let quantity = u16::from_be_bytes([body[2], body[3]]);
                if quantity == 0 || quantity as usize > MAX_REGISTERS {
                    return Err(DecodeError::CountMismatch {
                        reason: "write quantity outside protocol bounds",
                        at: 10,
                    });
                }
                FrameBody::WriteMultipleRegistersResponse {
                    start_address,
                    quantity,
                }
            }
            n if n >= 5 => {
                let start_address = u16::from_be_bytes([body[0], body[1]]);
                let quantity = u16::from_be_bytes([body[2], body[3]]) as usize;
                let byte_count = body[4] as usize;
                if byte_count != n - 5 || byte_count != quantity * 2 {
                    return Err(DecodeError::CountMismatch {
                        reason: "write byte count does not match quantity",
                        at: 12,
                    });
                }
                if quantity == 0 || quantity > MAX_REGISTERS {
                    return Err(DecodeError::CountMismatch {
                        reason: "register count outside protocol bounds",
                        at: 10,
                    });
                }
                let values = (0..quantity)
                    .map(|i| u16::from_be_bytes([body[5 + 2 * i], body[6 + 2 * i]]))
                    .collect();
                FrameBody::WriteMultipleRegistersRequest {
                    start_address,
                    values,
                }
            }
            _ => return Err(DecodeError::ShortBuffer { at: buf.len() }),
        },
        f if f & EXCEPTION_BIT != 0 => {
            let base = f & !EXCEPTION_BIT;
            if base != FC_READ_HOLDING && base != FC_WRITE_MULTIPLE {
                return Err(DecodeError::UnknownFunction { code: f, at: 7 });
            }
            if body.len() != 1 {
                return Err(DecodeError::LengthMismatch {
                    declared,
                    actual: body.len() + 2,
                });
            }
            FrameBody::ExceptionResponse {
                function: base,
                code: body[0],
            }
        }
        other => return Err(DecodeError::UnknownFunction { code: other, at: 7 }),
    };
    Ok(ScadaFrame {
        transaction_id,
        unit_id,
        body: parsed,
    })
}

fn unreachable_short() -> DecodeError {
    // body length was checked before slicing
    DecodeError::ShortBuffer { at: 0 }
}

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("value {value} not representable with scale {scale}, offset {offset}")]
    OutOfRange { value: f64, scale: f64, offset: f64 },
    #[error("register payload length {len} not a multiple of {per_value}")]
    Alignment { len: usize, per_value: usize },
}

/// Fixed-point mapping of measurement/actuation reals onto registers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegisterCodec {
    pub scale: f64,
    pub offset: f64,
    pub registers_per_value: u8,
}

impl Default for RegisterCodec {
    fn default() -> Self {
        // 16-bit fixed point covering roughly +/-32.767
        RegisterCodec {
            scale: 0.001,
            offset: -32.768,
            registers_per_value: 1,
        }
    }
}

impl RegisterCodec {
    pub fn wide() -> Self {
        RegisterCodec {
            scale: 0.001,
            offset: -2_147_483.648,
            registers_per_value: 2,
        }
    }

    fn max_count(&self) -> u64 {
        match self.registers_per_value {
            1 => u16::MAX as u64,
            _ => u32::MAX as u64,
        }
    }

    pub fn pack_value(&self, value: f64) -> Result<Vec<u16>, CodecError> {
        let counts = ((value - self.offset) / self.scale).round();
        if !counts.is_finite() || counts < 0.0 || counts > self.max_count() as f64 {
            return Err(CodecError::OutOfRange {
                value,
                scale: self.scale,
                offset: self.offset,
            });
        }
        let counts = counts as u64;
        Ok(match self.registers_per_value {
            1 => vec![counts as u16],
            _ => vec![(counts >> 16) as u16, (counts & 0xffff) as u16],
        })
    }

    pub fn unpack_value(&self, regs: &[u16]) -> Result<f64, CodecError> {
        let per = self.registers_per_value.max(1) as usize;
        if regs.len() != per {
            return Err(CodecError::Alignment {
                len: regs.len(),
                per_value: per,
            });
        }
        let counts = match self.registers_per_value {
            1 => regs[0] as u64,
            _ => ((regs[0] as u64) << 16) | regs[1] as u64,
        };
        Ok(self.offset + self.scale * counts as f64)
    }

    pub fn pack_measurement(&self, values: &DVector<f64>) -> Result<Vec<u16>, CodecError> {
        let mut regs = Vec::with_capacity(values.len() * self.registers_per_value as usize);
        for &v in values.iter() {
            regs.extend(self.pack_value(v)?);
        }
        Ok(regs)
    }

    pub fn unpack_measurement(&self, regs: &[u16]) -> Result<DVector<f64>, CodecError> {
        let per = self.registers_per_value.max(1) as usize;
        if regs.is_empty() || !regs.len().is_multiple_of(per) {
            return Err(CodecError::Alignment {
                len: regs.len(),
                per_value: per,
            });
        }
        let values: Vec<f64> = regs
            .chunks(per)
            .map(|c| self.unpack_value(c))
            .collect::<Result<_, _>>()?;
        Ok(DVector::from_vec(values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_request_golden_bytes() {
        let frame = ScadaFrame {
            transaction_id: 0x0001,
            unit_id: 1,
            body: FrameBody::ReadHoldingRegistersRequest {
                start_address: 0x0000,
                quantity: 2,
            },
        };
        let bytes = encode_frame(&frame).unwrap();
        assert_eq!(
            bytes,
            vec![0x00, 0x01, 0x00, 0x00, 0x00, 0x06, 0x01, 0x03, 0x00, 0x00, 0x00, 0x02]
        );
        assert_eq!(decode_frame(&bytes).unwrap(), frame);
    }

    #[test]
    fn read_response_golden_bytes() {
        let frame = ScadaFrame {
            transaction_id: 0x0001,
            unit_id: 1,
            body: FrameBody::ReadHoldingRegistersResponse {
                values: vec![0x000a, 0x0102],
            },
        };
        let bytes = encode_frame(&frame).unwrap();
        assert_eq!(
            bytes,
            vec![0x00, 0x01, 0x00, 0x00, 0x00, 0x07, 0x01, 0x03, 0x04, 0x00, 0x0a, 0x01, 0x02]
        );
        assert_eq!(decode_frame(&bytes).unwrap(), frame);
    }

    #[test]
    fn truncated_buffer_reports_short_error() {
        let err = decode_frame(&[0x00, 0x01, 0x00]).unwrap_err();
        assert_eq!(err, DecodeError::ShortBuffer { at: 3 });
    }

    #[test]
    fn unknown_function_code_rejected() {
        let frame = ScadaFrame {
            transaction_id: 7,
            unit_id: 1,
            body: FrameBody::ReadHoldingRegistersRequest {
                start_address: 0,
                quantity: 1,
            },
        };
        let mut bytes = encode_frame(&frame).unwrap();
        bytes[7] = 0x2a;
        assert!(matches!(
            decode_frame(&bytes),
            Err(DecodeError::UnknownFunction { code: 0x2a, at: 7 })
        ));
    }

    #[test]
    fn length_field_mismatch_rejected() {
        let frame = ScadaFrame {
            transaction_id: 7,
            unit_id: 1,
            body: FrameBody::ReadHoldingRegistersResponse { values: vec![1, 2] },
        };
        let mut bytes = encode_frame(&frame).unwrap();
        bytes[5] += 1;
        assert!(matches!(
            decode_frame(&bytes),
            Err(DecodeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn register_count_bounds_enforced() {
        let too_many = ScadaFrame {
            transaction_id: 0,
            unit_id: 0,
            body: FrameBody::ReadHoldingRegistersResponse {
                values: vec![0; MAX_REGISTERS + 1],
            },
        };
        assert_eq!(
            encode_frame(&too_many),
            Err(EncodeError::RegisterCount {
                count: MAX_REGISTERS + 1
            })
        );
        let empty = ScadaFrame {
            transaction_id: 0,
            unit_id: 0,
            body: FrameBody::WriteMultipleRegistersRequest {
                start_address: 0,
                values: vec![],
            },
        };
        assert_eq!(encode_frame(&empty), Err(EncodeError::RegisterCount { count: 0 }));
    }

    #[test]
    fn exception_round_trip() {
        let frame = ScadaFrame {
            transaction_id: 9,
            unit_id: 3,
            body: FrameBody::ExceptionResponse {
                function: 0x03,
                code: 0x02,
            },
        };
        let bytes = encode_frame(&frame).unwrap();
        assert_eq!(decode_frame(&bytes).unwrap(), frame);
    }

    #[test]
    fn codec_midpoint_and_identity() {
        let codec = RegisterCodec::default();
        let regs = codec.pack_value(0.0).unwrap();
        assert_eq!(regs, vec![0x8000]);
        assert!(codec.unpack_value(&regs).unwrap().abs() < codec.scale / 2.0);

        let ints = RegisterCodec {
            scale: 1.0,
            offset: 0.0,
            registers_per_value: 1,
        };
        assert_eq!(ints.pack_value(10.0).unwrap(), vec![0x000a]);
        assert_eq!(ints.unpack_value(&[0x000a]).unwrap(), 10.0);
    }

    #[test]
    fn codec_rejects_out_of_range() {
        let codec = RegisterCodec::default();
        assert!(matches!(
            codec.pack_value(100.0),
            Err(CodecError::OutOfRange { .. })
        ));
        assert!(matches!(
            codec.pack_value(-100.0),
            Err(CodecError::OutOfRange { .. })
        ));
    }

    #[test]
    fn wide_codec_round_trips_large_values() {
        let codec = RegisterCodec::wide();
        for v in [-100000.0, -1.5, 0.0, 3.25, 99999.125] {
            let regs = codec.pack_value(v).unwrap();
            assert_eq!(regs.len(), 2);
            let back = codec.unpack_value(&regs).unwrap();
            assert!((back - v).abs() <= codec.scale / 2.0 + 1e-9, "v={v} back={back}");
        }
    }
}
