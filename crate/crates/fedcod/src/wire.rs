//! Bit-exact frame serialization.
//!
//! Every protocol message is one frame. The byte layout is fixed big-endian
//! so golden-file tests stay stable across platforms:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FCOD"
//!      4     1  version (1)
//!      5     1  msg_type (1=Block 2=RoundStart 3=DownloadComplete
//!                         4=UploadComplete 5=DecodeAck)
//!      6     4  round        (u32)
//!     10     2  origin       (u16)
//!     12     2  block_index  (u16)
//!     14     1  flags        (bit0 = server origin, bit1 = aggregated)
//!     15     2  agr_count    (u16)
//!     17     2  coeff_len    (u16, number of f64 coefficients)
//!     19     4  payload_len  (u32, bytes; multiple of 4)
//!     23     -  coefficients (coeff_len x f64 BE), then payload (f32 BE)
//! ```
//!
//! The header is exactly 23 bytes; a frame's total length is
//! `23 + 8*coeff_len + payload_len`. The partition count `k` of a block
//! frame equals its `coeff_len`, so it is not carried separately. Control
//! frames (`msg_type != Block`) have `coeff_len = payload_len = 0`; the
//! `block_index` field of a `RoundStart` frame carries the round's
//! redundancy budget.

use crate::coding::{CoefficientVector, EncodedBlock, OriginKind};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FCOD";
pub const VERSION: u8 = 1;
/// Fixed header length in bytes, before coefficients.
pub const HEADER_LEN: usize = 23;

const FLAG_SERVER_ORIGIN: u8 = 0b01;
const FLAG_AGGREGATED: u8 = 0b10;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("unsupported frame: {0}")]
    UnsupportedFrame(String),
    #[error("incomplete frame: need {needed} bytes, got {got}")]
    IncompleteFrame { needed: usize, got: usize },
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Block = 1,
    RoundStart = 2,
    DownloadComplete = 3,
    UploadComplete = 4,
    DecodeAck = 5,
}

impl MsgType {
    fn from_byte(b: u8) -> Option<MsgType> {
        match b {
            1 => Some(MsgType::Block),
            2 => Some(MsgType::RoundStart),
            3 => Some(MsgType::DownloadComplete),
            4 => Some(MsgType::UploadComplete),
            5 => Some(MsgType::DecodeAck),
            _ => None,
        }
    }
}

/// One protocol message. Block frames carry coefficients and payload;
/// control frames carry header fields only.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub round: u32,
    pub origin: u16,
    pub block_index: u16,
    pub origin_kind: OriginKind,
    pub agr_count: u16,
    pub coefficients: Vec<f64>,
    pub payload: Vec<f32>,
}

impl Frame {
    /// A control frame with empty coefficient/payload sections.
    pub fn control(msg_type: MsgType, round: u32, origin: u16) -> Frame {
        Frame {
            msg_type,
            round,
            origin,
            block_index: 0,
            origin_kind: OriginKind::ClientOrigin,
            agr_count: 0,
            coefficients: Vec::new(),
            payload: Vec::new(),
        }
    }

    /// A round-start announcement carrying the redundancy budget.
    pub fn round_start(round: u32, origin: u16, redundancy: u16) -> Frame {
        let mut f = Frame::control(MsgType::RoundStart, round, origin);
        f.block_index = redundancy;
        f
    }

    pub fn from_block(block: &EncodedBlock) -> Frame {
        Frame {
            msg_type: MsgType::Block,
            round: block.round,
            origin: block.origin,
            block_index: block.block_index,
            origin_kind: block.origin_kind,
            agr_count: block.agr_count,
            coefficients: block.coeffs.coefficients.clone(),
            payload: block.payload.clone(),
        }
    }

    pub fn to_block(&self) -> Result<EncodedBlock, WireError> {
        if self.msg_type != MsgType::Block {
            return Err(WireError::InvalidFrame(
                "control frame carries no block".into(),
            ));
        }
        Ok(EncodedBlock {
            round: self.round,
            origin: self.origin,
            block_index: self.block_index,
            coeffs: CoefficientVector::new(self.coefficients.clone()),
            payload: self.payload.clone(),
            origin_kind: self.origin_kind,
            agr_count: self.agr_count,
        })
    }

    /// Partition count implied by the coefficient section.
    pub fn k(&self) -> usize {
        self.coefficients.len()
    }

    /// Exact encoded size in bytes.
    pub fn wire_size(&self) -> usize {
        HEADER_LEN + 8 * self.coefficients.len() + 4 * self.payload.len()
    }

    fn validate(&self) -> Result<(), WireError> {
        if self.msg_type != MsgType::Block
            && (!self.coefficients.is_empty() || !self.payload.is_empty())
        {
            return Err(WireError::InvalidFrame(
                "control frame must have empty coefficient and payload sections".into(),
            ));
        }
        if self.coefficients.len() > u16::MAX as usize {
            return Err(WireError::InvalidFrame("coefficient count exceeds u16".into()));
        }
        if 4 * self.payload.len() > u32::MAX as usize {
            return Err(WireError::InvalidFrame("payload exceeds u32 bytes".into()));
        }
        Ok(())
    }
}

fn flags_of(kind: OriginKind) -> u8 {
    match kind {
        OriginKind::ClientOrigin => 0,
        OriginKind::ServerOrigin => FLAG_SERVER_ORIGIN,
        OriginKind::Aggregated => FLAG_AGGREGATED,
    }
}

fn kind_of(flags: u8) -> Result<OriginKind, WireError> {
    match flags {
        0 => Ok(OriginKind::ClientOrigin),
        FLAG_SERVER_ORIGIN => Ok(OriginKind::ServerOrigin),
        FLAG_AGGREGATED => Ok(OriginKind::Aggregated),
        _ => Err(WireError::MalformedFrame(format!("bad flags {flags:#04x}"))),
    }
}

/// Serializes a frame to its byte layout.
pub fn frame_encode(frame: &Frame) -> Result<Vec<u8>, WireError> {
    frame.validate()?;
    let mut out = Vec::with_capacity(frame.wire_size());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&frame.round.to_be_bytes());
    out.extend_from_slice(&frame.origin.to_be_bytes());
    out.extend_from_slice(&frame.block_index.to_be_bytes());
    out.push(flags_of(frame.origin_kind));
    out.extend_from_slice(&frame.agr_count.to_be_bytes());
    out.extend_from_slice(&(frame.coefficients.len() as u16).to_be_bytes());
    out.extend_from_slice(&((4 * frame.payload.len()) as u32).to_be_bytes());
    for c in &frame.coefficients {
        out.extend_from_slice(&c.to_be_bytes());
    }
    for p in &frame.payload {
        out.extend_from_slice(&p.to_be_bytes());
    }
    debug_assert_eq!(out.len(), frame.wire_size());
    Ok(out)
}

/// Parses a frame, rejecting bad magic/version, truncation, and any bytes
/// beyond the declared lengths.
pub fn frame_decode(bytes: &[u8]) -> Result<Frame, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::IncompleteFrame {
            needed: HEADER_LEN,
            got: bytes.len(),
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(WireError::UnsupportedFrame(format!(
            "bad magic {:02x}{:02x}{:02x}{:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    if bytes[4] != VERSION {
        return Err(WireError::UnsupportedFrame(format!(
            "unsupported version {}",
            bytes[4]
        )));
    }
    let msg_type = MsgType::from_byte(bytes[5])
        .ok_or_else(|| WireError::MalformedFrame(format!("unknown msg_type {}", bytes[5])))?;
    let round = u32::from_be_bytes(bytes[6..10].try_into().unwrap());
    let origin = u16::from_be_bytes(bytes[10..12].try_into().unwrap());
    let block_index = u16::from_be_bytes(bytes[12..14].try_into().unwrap());
    let origin_kind = kind_of(bytes[14])?;
    let agr_count = u16::from_be_bytes(bytes[15..17].try_into().unwrap());
    let coeff_len = u16::from_be_bytes(bytes[17..19].try_into().unwrap()) as usize;
    let payload_len = u32::from_be_bytes(bytes[19..23].try_into().unwrap()) as usize;
    if payload_len % 4 != 0 {
        return Err(WireError::MalformedFrame(format!(
            "payload_len {payload_len} not a multiple of 4"
        )));
    }
    if msg_type != MsgType::Block && (coeff_len != 0 || payload_len != 0) {
        return Err(WireError::MalformedFrame(
            "control frame with non-empty body".into(),
        ));
    }
    let total = HEADER_LEN + 8 * coeff_len + payload_len;
    if bytes.len() < total {
        return Err(WireError::IncompleteFrame {
            needed: total,
            got: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(WireError::MalformedFrame(format!(
            "{} trailing bytes beyond declared length {}",
            bytes.len() - total,
            total
        )));
    }
    let mut coefficients = Vec::with_capacity(coeff_len);
    let mut at = HEADER_LEN;
    for _ in 0..coeff_len {
        coefficients.push(f64::from_be_bytes(bytes[at..at + 8].try_into().unwrap()));
        at += 8;
    }
    let mut payload = Vec::with_capacity(payload_len / 4);
    for _ in 0..payload_len / 4 {
        payload.push(f32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()));
        at += 4;
    }
    Ok(Frame {
        msg_type,
        round,
        origin,
        block_index,
        origin_kind,
        agr_count,
        coefficients,
        payload,
    })
}

/// On-wire byte count of an encoded block, header and coefficients included.
/// This is the number charged to link transfers and traffic counters.
pub fn frame_size_of(block: &EncodedBlock) -> usize {
    HEADER_LEN + 8 * block.coeffs.k() + 4 * block.payload.len()
}

/// Byte count of any control frame.
pub fn control_frame_size() -> usize {
    HEADER_LEN
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding::shared_coefficients;
    use crate::rng::{substream, Stream};
    use rand::Rng;

    fn fuzz_frame<R: rand::Rng>(rng: &mut R) -> Frame {
        let msg_type = MsgType::from_byte(rng.gen_range(1u8..=5)).unwrap();
        let is_block = msg_type == MsgType::Block;
        let coeff_len = if is_block { rng.gen_range(0usize..8) } else { 0 };
        let payload_len = if is_block { rng.gen_range(0usize..32) } else { 0 };
        Frame {
            msg_type,
            round: rng.gen(),
            origin: rng.gen(),
            block_index: rng.gen(),
            origin_kind: if !is_block {
                OriginKind::ClientOrigin
            } else {
                match rng.gen_range(0u8..3) {
                    0 => OriginKind::ClientOrigin,
                    1 => OriginKind::ServerOrigin,
                    _ => OriginKind::Aggregated,
                }
            },
            agr_count: rng.gen(),
            coefficients: (0..coeff_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            payload: (0..payload_len).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        }
    }

    #[test]
    fn decode_ack_layout() {
        let f = Frame::control(MsgType::DecodeAck, 1, 3);
        let bytes = frame_encode(&f).unwrap();
        assert_eq!(bytes.len(), 23);
        assert_eq!(&bytes[..6], &[0x46, 0x43, 0x4F, 0x44, 0x01, 0x05]);
        assert_eq!(&bytes[6..10], &[0, 0, 0, 1]); // round
        assert_eq!(&bytes[10..12], &[0, 3]); // origin
    }

    #[test]
    fn block_frame_length_arithmetic() {
        let f = Frame {
            msg_type: MsgType::Block,
            round: 0,
            origin: 0,
            block_index: 0,
            origin_kind: OriginKind::ServerOrigin,
            agr_count: 1,
            coefficients: vec![1.0, 0.0],
            payload: vec![],
        };
        assert_eq!(frame_encode(&f).unwrap().len(), 23 + 16);
    }

    #[test]
    fn roundtrip_fuzzed_corpus() {
        let mut rng = substream(1234, Stream::Model, &[100]);
        for i in 0..1000 {
            let f = fuzz_frame(&mut rng);
            let bytes = frame_encode(&f).unwrap();
            let back = frame_decode(&bytes).unwrap_or_else(|e| panic!("frame {i}: {e}"));
            assert_eq!(back, f, "frame {i} did not roundtrip");
        }
    }

    #[test]
    fn bad_magic_is_unsupported() {
        let mut bytes = frame_encode(&Frame::control(MsgType::DecodeAck, 0, 0)).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            frame_decode(&bytes),
            Err(WireError::UnsupportedFrame(_))
        ));
    }

    #[test]
    fn bad_version_is_unsupported() {
        let mut bytes = frame_encode(&Frame::control(MsgType::DecodeAck, 0, 0)).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            frame_decode(&bytes),
            Err(WireError::UnsupportedFrame(_))
        ));
    }

    #[test]
    fn truncated_is_incomplete() {
        let bytes = frame_encode(&Frame::control(MsgType::RoundStart, 0, 0)).unwrap();
        assert_eq!(
            frame_decode(&bytes[..10]),
            Err(WireError::IncompleteFrame { needed: 23, got: 10 })
        );
    }

    #[test]
    fn truncated_body_is_incomplete() {
        let mut rng = substream(5, Stream::Model, &[101]);
        let mut f = fuzz_frame(&mut rng);
        f.msg_type = MsgType::Block;
        f.coefficients = vec![1.0, 2.0];
        f.payload = vec![3.0];
        let bytes = frame_encode(&f).unwrap();
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(
            frame_decode(cut),
            Err(WireError::IncompleteFrame { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_malformed() {
        let mut bytes = frame_encode(&Frame::control(MsgType::DecodeAck, 0, 0)).unwrap();
        bytes.push(0);
        assert!(matches!(
            frame_decode(&bytes),
            Err(WireError::MalformedFrame(_))
        ));
    }

    #[test]
    fn control_frame_with_body_rejected_both_ways() {
        let mut f = Frame::control(MsgType::UploadComplete, 0, 0);
        f.payload = vec![1.0];
        assert!(matches!(frame_encode(&f), Err(WireError::InvalidFrame(_))));

        // And a hand-built byte stream claiming a body on a control type.
        let mut bytes = frame_encode(&Frame::control(MsgType::UploadComplete, 0, 0)).unwrap();
        bytes[19..23].copy_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            frame_decode(&bytes),
            Err(WireError::MalformedFrame(_))
        ));
    }

    #[test]
    fn bad_flags_rejected() {
        let f = Frame {
            msg_type: MsgType::Block,
            round: 0,
            origin: 0,
            block_index: 0,
            origin_kind: OriginKind::ServerOrigin,
            agr_count: 1,
            coefficients: vec![1.0],
            payload: vec![],
        };
        let mut bytes = frame_encode(&f).unwrap();
        bytes[14] = 0b11;
        assert!(matches!(
            frame_decode(&bytes),
            Err(WireError::MalformedFrame(_))
        ));
    }

    #[test]
    fn size_of_block_k10_1000_scalars() {
        let block = crate::coding::EncodedBlock {
            round: 0,
            origin: 0,
            block_index: 0,
            coeffs: shared_coefficients(0, 10),
            payload: vec![0.0; 1000],
            origin_kind: OriginKind::Aggregated,
            agr_count: 1,
        };
        assert_eq!(frame_size_of(&block), 23 + 80 + 4000);
    }

    #[test]
    fn control_frame_size_is_header() {
        assert_eq!(control_frame_size(), 23);
        let bytes = frame_encode(&Frame::control(MsgType::DownloadComplete, 7, 2)).unwrap();
        assert_eq!(bytes.len(), 23);
    }

    #[test]
    fn header_overhead_fraction_small() {
        // Full model of 1e6 scalars at k=10: 10 blocks, each 23 + 80 header
        // bytes on top of 400,000 payload bytes.
        let k = 10usize;
        let part = 1_000_000 / k;
        let per_block = 23 + 8 * k + 4 * part;
        let total = k * per_block;
        let payload_total = 4 * 1_000_000;
        let overhead = (total - payload_total) as f64 / payload_total as f64;
        assert!(overhead < 0.01, "overhead fraction {overhead}");
        assert_eq!(per_block, frame_size_of(&crate::coding::EncodedBlock {
            round: 0,
            origin: 0,
            block_index: 0,
            coeffs: shared_coefficients(0, k),
            payload: vec![0.0; part],
            origin_kind: OriginKind::ServerOrigin,
            agr_count: 1,
        }));
    }

    #[test]
    fn block_conversion_roundtrip() {
        let mut rng = substream(9, Stream::Model, &[102]);
        let block = crate::coding::EncodedBlock {
            round: 3,
            origin: 4,
            block_index: 7,
            coeffs: shared_coefficients(7, 4),
            payload: (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            origin_kind: OriginKind::Aggregated,
            agr_count: 5,
        };
        let f = Frame::from_block(&block);
        assert_eq!(f.wire_size(), frame_size_of(&block));
        assert_eq!(f.to_block().unwrap(), block);
    }
}
