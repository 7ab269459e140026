//! Byte layouts for plaintext answers and relay share frames.
//!
//! All integers are big-endian.
//!
//! ```text
//! plain:  query_id u64 | stratum u16 | timestamp_ms u64 | n_buckets u16 | bits (MSB-first, padded) | crc32 u32
//! share:  0x50 0x41 | 0x01 | message_id [16] | share_index u8 | n_proxies u8 | body_len u32 | body
//! ```

use super::TransportError;
use crate::query::{AnswerVector, BitVector};

pub const SHARE_MAGIC: [u8; 2] = [0x50, 0x41];
pub const WIRE_VERSION: u8 = 0x01;
/// Bytes in a share frame before the body.
pub const SHARE_HEADER_LEN: usize = 2 + 1 + 16 + 1 + 1 + 4;
const PLAIN_HEADER_LEN: usize = 8 + 2 + 8 + 2;
const CRC_LEN: usize = 4;

/// One client's randomized answer for one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PlainMessage {
    pub query_id: u64,
    pub stratum_id: u16,
    pub timestamp_ms: u64,
    pub bits: BitVector,
}

impl PlainMessage {
    pub fn new(query_id: u64, stratum_id: u16, timestamp_ms: u64, bits: BitVector) -> Self {
        PlainMessage {
            query_id,
            stratum_id,
            timestamp_ms,
            bits,
        }
    }

    pub fn from_answer(answer: AnswerVector, stratum_id: u16) -> Self {
        PlainMessage::new(answer.query_id, stratum_id, answer.timestamp_ms, answer.bits)
    }

    /// Length of [`PlainMessage::to_bytes`] for `n_buckets` buckets.
    pub fn encoded_len(n_buckets: usize) -> usize {
        PLAIN_HEADER_LEN + n_buckets.div_ceil(8) + CRC_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.bits.len();
        assert!(n <= u16::MAX as usize, "at most 65535 buckets");
        let mut out = Vec::with_capacity(Self::encoded_len(n));
        out.extend_from_slice(&self.query_id.to_be_bytes());
        out.extend_from_slice(&self.stratum_id.to_be_bytes());
        out.extend_from_slice(&self.timestamp_ms.to_be_bytes());
        out.extend_from_slice(&(n as u16).to_be_bytes());
        out.extend_from_slice(&self.bits.pack());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TransportError> {
        let corrupt = |why: &str| TransportError::CorruptMessage(why.to_string());
        if bytes.len() < PLAIN_HEADER_LEN + CRC_LEN {
            return Err(corrupt("message shorter than its header"));
        }
        let (content, crc) = bytes.split_at(bytes.len() - CRC_LEN);
        if crc32fast::hash(content) != u32::from_be_bytes(crc.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let query_id = u64::from_be_bytes(content[0..8].try_into().unwrap());
        let stratum_id = u16::from_be_bytes(content[8..10].try_into().unwrap());
        let timestamp_ms = u64::from_be_bytes(content[10..18].try_into().unwrap());
        let n = u16::from_be_bytes(content[18..20].try_into().unwrap()) as usize;
        let payload = &content[PLAIN_HEADER_LEN..];
        if payload.len() != n.div_ceil(8) {
            return Err(corrupt("payload length disagrees with bucket count"));
        }
        let bits = BitVector::unpack(payload, n).ok_or_else(|| corrupt("nonzero padding bits"))?;
        Ok(PlainMessage::new(query_id, stratum_id, timestamp_ms, bits))
    }
}

/// One of the `n` XOR shares of a serialized [`PlainMessage`].
///
/// Carries no sender identity and no marker telling a key share from the
/// masked message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareMessage {
    pub message_id: u128,
    /// 1-based position among the shares.
    pub share_index: u8,
    pub n_proxies: u8,
    pub body: Vec<u8>,
}

impl ShareMessage {
    pub fn frame_len(&self) -> usize {
        SHARE_HEADER_LEN + self.body.len()
    }

    pub fn to_frame(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.frame_len());
        out.extend_from_slice(&SHARE_MAGIC);
        out.push(WIRE_VERSION);
        out.extend_from_slice(&self.message_id.to_be_bytes());
        out.push(self.share_index);
        out.push(self.n_proxies);
        out.extend_from_slice(&(self.body.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_frame(frame: &[u8]) -> Result<Self, TransportError> {
        let bad = |why: String| TransportError::MalformedShare(why);
        if frame.len() < SHARE_HEADER_LEN {
            return Err(bad(format!("frame of {} bytes is shorter than the header", frame.len())));
        }
        if frame[0..2] != SHARE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        if frame[2] != WIRE_VERSION {
            return Err(bad(format!("unsupported version {}", frame[2])));
        }
        let message_id = u128::from_be_bytes(frame[3..19].try_into().unwrap());
        let share_index = frame[19];
        let n_proxies = frame[20];
        let body_len = u32::from_be_bytes(frame[21..25].try_into().unwrap()) as usize;
        let body = &frame[SHARE_HEADER_LEN..];
        if body.len() != body_len {
            return Err(bad(format!("body_len {body_len} but {} body bytes", body.len())));
        }
        let share = ShareMessage {
            message_id,
            share_index,
            n_proxies,
            body: body.to_vec(),
        };
        share.check()?;
        Ok(share)
    }

    /// Structural sanity; the body itself is opaque.
    pub fn check(&self) -> Result<(), TransportError> {
        if self.body.is_empty() {
            return Err(TransportError::MalformedShare("empty body".into()));
        }
        if self.n_proxies < 2 || self.share_index == 0 || self.share_index > self.n_proxies {
            return Err(TransportError::MalformedShare(format!(
                "share index {} of {}",
                self.share_index, self.n_proxies
            )));
        }
        Ok(())
    }
}
