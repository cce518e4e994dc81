//! Smart-meter datagram and its two-fragment form for the slow data rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Micros;

pub const DATAGRAM_LEN: usize = 96;
pub const FRAGMENT_LEN: usize = 51;
pub const FRAGMENT_HEADER_LEN: usize = 3;
pub const FRAGMENT_DATA_LEN: usize = FRAGMENT_LEN - FRAGMENT_HEADER_LEN;
pub const READINGS: usize = 19;
pub const DEFAULT_REASSEMBLY_TIMEOUT: Micros = Micros::from_secs(600);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("unknown meter type {0}")]
    MeterType(u8),
    #[error("reserved bytes are not zero")]
    Reserved,
    #[error("fragment header {0:#04x} is invalid")]
    Header(u8),
    #[error("fragment {index} of datagram {id} arrived twice with different data")]
    Integrity { id: u16, index: u8 },
    #[error("fragments of datagram {id} disagree on the fragment count")]
    MixedCounts { id: u16 },
    #[error("datagram {id} expired with {have} of {count} fragments")]
    Expired { id: u16, have: usize, count: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeterType {
    #[default]
    Electricity = 1,
    Gas = 2,
    Water = 3,
}

impl TryFrom<u8> for MeterType {
    type Error = CodecError;
    fn try_from(v: u8) -> Result<Self, CodecError> {
        match v {
            1 => Ok(MeterType::Electricity),
            2 => Ok(MeterType::Gas),
            3 => Ok(MeterType::Water),
            other => Err(CodecError::MeterType(other)),
        }
    }
}

/// 96-byte big-endian reading record.
///
/// | bytes  | field          |
/// |--------|----------------|
/// | 0..8   | meter_id       |
/// | 8..12  | datagram_seq   |
/// | 12..16 | timestamp      |
/// | 16     | meter_type     |
/// | 17     | status_flags   |
/// | 18..94 | 19 readings    |
/// | 94..96 | reserved, zero |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MeterDatagram {
    pub meter_id: u64,
    pub datagram_seq: u32,
    pub timestamp: u32,
    pub meter_type: MeterType,
    pub status_flags: u8,
    pub readings: [i32; READINGS],
}

impl MeterDatagram {
    pub fn encode(&self) -> [u8; DATAGRAM_LEN] {
        let mut out = [0u8; DATAGRAM_LEN];
        out[0..8].copy_from_slice(&self.meter_id.to_be_bytes());
        out[8..12].copy_from_slice(&self.datagram_seq.to_be_bytes());
        out[12..16].copy_from_slice(&self.timestamp.to_be_bytes());
        out[16] = self.meter_type as u8;
        out[17] = self.status_flags;
        for (i, r) in self.readings.iter().enumerate() {
            out[18 + 4 * i..22 + 4 * i].copy_from_slice(&r.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != DATAGRAM_LEN {
            return Err(CodecError::Length {
                expected: DATAGRAM_LEN,
                got: bytes.len(),
            });
        }
        if bytes[94..] != [0, 0] {
            return Err(CodecError::Reserved);
        }
        let be32 = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap());
        let mut readings = [0i32; READINGS];
        for (i, r) in readings.iter_mut().enumerate() {
            *r = be32(18 + 4 * i) as i32;
        }
        Ok(Self {
            meter_id: u64::from_be_bytes(bytes[0..8].try_into().unwrap()),
            datagram_seq: be32(8),
            timestamp: be32(12),
            meter_type: MeterType::try_from(bytes[16])?,
            status_flags: bytes[17],
            readings,
        })
    }
}

/// 51-byte piece of a datagram: id (2, big-endian), index/count nibbles, data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fragment {
    pub datagram_id: u16,
    pub index: u8,
    pub count: u8,
    pub data: [u8; FRAGMENT_DATA_LEN],
}

impl Fragment {
    pub fn header(&self) -> u8 {
        self.index << 4 | self.count
    }

    pub fn to_bytes(&self) -> [u8; FRAGMENT_LEN] {
        let mut out = [0u8; FRAGMENT_LEN];
        out[0..2].copy_from_slice(&self.datagram_id.to_be_bytes());
        out[2] = self.header();
        out[3..].copy_from_slice(&self.data);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != FRAGMENT_LEN {
            return Err(CodecError::Length {
                expected: FRAGMENT_LEN,
                got: bytes.len(),
            });
        }
        let h = bytes[2];
        let (index, count) = (h >> 4, h & 0x0f);
        if count == 0 || index >= count {
            return Err(CodecError::Header(h));
        }
        Ok(Self {
            datagram_id: u16::from_be_bytes([bytes[0], bytes[1]]),
            index,
            count,
            data: bytes[3..].try_into().unwrap(),
        })
    }
}

/// Splits an encoded datagram into its two fragments, keyed by the low 16
/// bits of the sequence number carried in bytes 8..12.
pub fn fragment(datagram: &[u8]) -> Result<[Fragment; 2], CodecError> {
    if datagram.len() != DATAGRAM_LEN {
        return Err(CodecError::Length {
            expected: DATAGRAM_LEN,
            got: datagram.len(),
        });
    }
    let id = u16::from_be_bytes([datagram[10], datagram[11]]);
    let piece = |index: u8| Fragment {
        datagram_id: id,
        index,
        count: 2,
        data: datagram[usize::from(index) * FRAGMENT_DATA_LEN..][..FRAGMENT_DATA_LEN]
            .try_into()
            .unwrap(),
    };
    Ok([piece(0), piece(1)])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reassembly {
    Complete([u8; DATAGRAM_LEN]),
    Pending,
}

#[derive(Debug, Clone)]
struct Partial {
    first_seen: Micros,
    count: u8,
    pieces: BTreeMap<u8, [u8; FRAGMENT_DATA_LEN]>,
}

/// Per-source buffer of incomplete datagrams.
#[derive(Debug, Clone)]
pub struct Reassembler {
    timeout: Micros,
    partial: BTreeMap<(u64, u16), Partial>,
}

impl Default for Reassembler {
    fn default() -> Self {
        Self::new(DEFAULT_REASSEMBLY_TIMEOUT)
    }
}

impl Reassembler {
    pub fn new(timeout: Micros) -> Self {
        Self {
            timeout,
            partial: BTreeMap::new(),
        }
    }

    pub fn pending(&self) -> usize {
        self.partial.len()
    }

    /// Adds a fragment from `source` received at `now`.
    pub fn push(&mut self, source: u64, frag: &Fragment, now: Micros) -> Result<Reassembly, CodecError> {
        let key = (source, frag.datagram_id);
        let entry = self.partial.entry(key).or_insert_with(|| Partial {
            first_seen: now,
            count: frag.count,
            pieces: BTreeMap::new(),
        });
        if entry.count != frag.count {
            return Err(CodecError::MixedCounts { id: frag.datagram_id });
        }
        if let Some(existing) = entry.pieces.get(&frag.index) {
            if *existing != frag.data {
                return Err(CodecError::Integrity {
                    id: frag.datagram_id,
                    index: frag.index,
                });
            }
        }
        entry.pieces.insert(frag.index, frag.data);
        if entry.pieces.len() < usize::from(entry.count) || entry.count != 2 {
            return Ok(Reassembly::Pending);
        }
        let entry = self.partial.remove(&key).expect("entry present");
        let mut out = [0u8; DATAGRAM_LEN];
        for (i, data) in entry.pieces {
            out[usize::from(i) * FRAGMENT_DATA_LEN..][..FRAGMENT_DATA_LEN].copy_from_slice(&data);
        }
        Ok(Reassembly::Complete(out))
    }

    /// Drops partial datagrams older than the timeout, reporting each.
    pub fn expire(&mut self, now: Micros) -> Vec<CodecError> {
        let timeout = self.timeout;
        let stale: Vec<_> = self
            .partial
            .iter()
            .filter(|(_, p)| now.saturating_sub(p.first_seen) >= timeout)
            .map(|(k, _)| *k)
            .collect();
        stale
            .into_iter()
            .map(|k| {
                let p = self.partial.remove(&k).unwrap();
                CodecError::Expired {
                    id: k.1,
                    have: p.pieces.len(),
                    count: p.count,
                }
            })
            .collect()
    }
}
