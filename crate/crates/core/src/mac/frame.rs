use std::fmt;

use serde::{Deserialize, Serialize};

use super::MacError;
use crate::airtime::FRAME_OVERHEAD;

/// Frame type carried in the top three bits of MHDR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MType {
    JoinRequest = 0,
    JoinAccept = 1,
    UnconfirmedUp = 2,
    UnconfirmedDown = 3,
    ConfirmedUp = 4,
    ConfirmedDown = 5,
}

impl MType {
    pub fn from_mhdr(mhdr: u8) -> Result<Self, MacError> {
        Ok(match mhdr >> 5 {
            0 => MType::JoinRequest,
            1 => MType::JoinAccept,
            2 => MType::UnconfirmedUp,
            3 => MType::UnconfirmedDown,
            4 => MType::ConfirmedUp,
            5 => MType::ConfirmedDown,
            other => return Err(MacError::UnknownMType(other)),
        })
    }

    pub fn mhdr(self) -> u8 {
        (self as u8) << 5
    }

    pub fn is_uplink(self) -> bool {
        matches!(
            self,
            MType::JoinRequest | MType::UnconfirmedUp | MType::ConfirmedUp
        )
    }

    pub fn is_confirmed(self) -> bool {
        matches!(self, MType::ConfirmedUp | MType::ConfirmedDown)
    }

    pub fn is_join(self) -> bool {
        matches!(self, MType::JoinRequest | MType::JoinAccept)
    }
}

pub const FCTRL_ACK: u8 = 0x20;

/// `MHDR | DevAddr | FCtrl | FCnt | FPort | FRMPayload | MIC`, little-endian
/// multi-byte fields. Join frames reuse the envelope with a zero DevAddr and
/// carry their fields in the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub mtype: MType,
    pub dev_addr: u32,
    pub fctrl: u8,
    pub fcnt: u16,
    pub fport: u8,
    pub payload: Vec<u8>,
    pub mic: [u8; 4],
}

impl Frame {
    pub fn len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ack(&self) -> bool {
        self.fctrl & FCTRL_ACK != 0
    }

    /// Bytes covered by the MIC: everything except the trailing tag.
    pub fn header_and_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.mtype.mhdr());
        out.extend_from_slice(&self.dev_addr.to_le_bytes());
        out.push(self.fctrl);
        out.extend_from_slice(&self.fcnt.to_le_bytes());
        out.push(self.fport);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header_and_payload();
        out.extend_from_slice(&self.mic);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, MacError> {
        if bytes.len() < FRAME_OVERHEAD {
            return Err(MacError::Truncated(bytes.len()));
        }
        let mhdr = bytes[0];
        if mhdr & 0x1f != 0 {
            return Err(MacError::UnsupportedMajor(mhdr));
        }
        let mtype = MType::from_mhdr(mhdr)?;
        let tail = bytes.len() - 4;
        Ok(Frame {
            mtype,
            dev_addr: u32::from_le_bytes(bytes[1..5].try_into().unwrap()),
            fctrl: bytes[5],
            fcnt: u16::from_le_bytes([bytes[6], bytes[7]]),
            fport: bytes[8],
            payload: bytes[9..tail].to_vec(),
            mic: bytes[tail..].try_into().unwrap(),
        })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} dev_addr={:08x} fcnt={} port={} len={}",
            self.mtype,
            self.dev_addr,
            self.fcnt,
            self.fport,
            self.len()
        )
    }
}
