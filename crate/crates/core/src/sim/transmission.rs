use serde::{Deserialize, Serialize};

use crate::time::Micros;

/// One frame on the air.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transmission {
    pub id: u64,
    /// Node index, or `u32::MAX - gateway` for downlinks.
    pub source: u32,
    pub channel_hz: u32,
    pub sf: u8,
    pub start: Micros,
    pub toa: Micros,
    pub tx_power_dbm: f64,
    pub frame: Vec<u8>,
}

impl Transmission {
    pub fn end(&self) -> Micros {
        self.start + self.toa
    }
}
