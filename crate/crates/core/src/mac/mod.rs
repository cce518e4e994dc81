//! LoRaWAN MAC: frames, sessions and device class receive behaviour.

pub mod class;
pub mod crypto;
pub mod frame;
pub mod session;

use thiserror::Error;

pub use class::{DeviceClass, DeviceEvent, DeviceState, Outcome, RxWindow};
pub use crypto::{AesCmac, Direction, Key, KeyedPrimitive};
pub use frame::{Frame, MType, FCTRL_ACK};
pub use session::{otaa_join, verify_mic, Activation, DevEui, Session};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MacError {
    #[error("frame of {0} bytes is shorter than the 13-byte envelope")]
    Truncated(usize),
    #[error("unsupported major version in MHDR {0:#04x}")]
    UnsupportedMajor(u8),
    #[error("reserved frame type {0}")]
    UnknownMType(u8),
    #[error("payload of {len} bytes exceeds the {max}-byte limit of this data rate")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("uplink frame counter exhausted; the session must be renewed")]
    CounterExhausted,
    #[error("MIC check failed")]
    BadMic,
    #[error("malformed join frame")]
    MalformedJoin,
    #[error("derived session keys collide")]
    DegenerateKeys,
    #[error("invalid device EUI {0:?}")]
    BadEui(String),
}
