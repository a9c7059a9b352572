//! Bit-exact binary encoding of packet streams and the sideband trace.
//!
//! A packet stream is a sequence of records `[len: u8][tag: u8][payload]`,
//! where `len` counts the tag and payload bytes. Tags: 1 = TSC (u64),
//! 2 = CYC (u64), 3 = PTW (u64 payload, u32 ptw id). All integers are
//! little-endian.
//!
//! The sideband file is a sequence of fixed 20-byte records:
//! timestamp u64, cpu u32, tid_out u32, tid_in u32.

use thiserror::Error;

use super::{Packet, SidebandRecord};

pub const TAG_TSC: u8 = 1;
pub const TAG_CYC: u8 = 2;
pub const TAG_PTW: u8 = 3;
pub const SIDEBAND_RECORD_LEN: usize = 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("truncated record at byte {0}")]
    Truncated(usize),
    #[error("unknown packet tag {tag} at byte {offset}")]
    UnknownTag { tag: u8, offset: usize },
    #[error("packet at byte {offset} has length {len}, expected {expected}")]
    BadLength { offset: usize, len: u8, expected: u8 },
    #[error("sideband length {0} is not a multiple of 20")]
    SidebandLength(usize),
}

pub fn encode_stream(packets: &[Packet]) -> Vec<u8> {
    let mut out = Vec::with_capacity(packets.len() * 10);
    for p in packets {
        match *p {
            Packet::Tsc { tsc } => {
                out.extend([9, TAG_TSC]);
                out.extend(tsc.to_le_bytes());
            }
            Packet::Cyc { elapsed } => {
                out.extend([9, TAG_CYC]);
                out.extend(elapsed.to_le_bytes());
            }
            Packet::Ptw { payload, id } => {
                out.extend([13, TAG_PTW]);
                out.extend(payload.to_le_bytes());
                out.extend(id.to_le_bytes());
            }
        }
    }
    out
}

fn u64_at(b: &[u8], i: usize) -> u64 {
    u64::from_le_bytes(b[i..i + 8].try_into().expect("8 bytes"))
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"))
}

pub fn decode_stream(bytes: &[u8]) -> Result<Vec<Packet>, FormatError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if i + 2 > bytes.len() {
            return Err(FormatError::Truncated(i));
        }
        let (len, tag) = (bytes[i], bytes[i + 1]);
        let expected = match tag {
            TAG_TSC | TAG_CYC => 9,
            TAG_PTW => 13,
            _ => return Err(FormatError::UnknownTag { tag, offset: i }),
        };
        if len != expected {
            return Err(FormatError::BadLength {
                offset: i,
                len,
                expected,
            });
        }
        let body = i + 2;
        if i + 1 + len as usize > bytes.len() {
            return Err(FormatError::Truncated(i));
        }
        out.push(match tag {
            TAG_TSC => Packet::Tsc {
                tsc: u64_at(bytes, body),
            },
            TAG_CYC => Packet::Cyc {
                elapsed: u64_at(bytes, body),
            },
            _ => Packet::Ptw {
                payload: u64_at(bytes, body),
                id: u32_at(bytes, body + 8),
            },
        });
        i += 1 + len as usize;
    }
    Ok(out)
}

pub fn encode_sideband(records: &[SidebandRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * SIDEBAND_RECORD_LEN);
    for r in records {
        out.extend(r.timestamp.to_le_bytes());
        out.extend(r.cpu.to_le_bytes());
        out.extend(r.tid_out.to_le_bytes());
        out.extend(r.tid_in.to_le_bytes());
    }
    out
}

pub fn decode_sideband(bytes: &[u8]) -> Result<Vec<SidebandRecord>, FormatError> {
    if !bytes.len().is_multiple_of(SIDEBAND_RECORD_LEN) {
        return Err(FormatError::SidebandLength(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(SIDEBAND_RECORD_LEN)
        .map(|c| SidebandRecord {
            timestamp: u64_at(c, 0),
            cpu: u32_at(c, 8),
            tid_out: u32_at(c, 12),
            tid_in: u32_at(c, 16),
        })
        .collect())
}
