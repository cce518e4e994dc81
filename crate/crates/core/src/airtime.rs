//! LoRa symbol timing and time-on-air.
//!
//! Uses the SX1272/SX1276 closed form. All durations are exact integer
//! microseconds: for the supported bandwidths the symbol time is a multiple
//! of 4 µs, so the 4.25-symbol preamble tail never produces a fraction.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Micros;

pub const MAX_PHY_PAYLOAD: usize = 255;
/// MHDR + FHDR + FPort + MIC.
pub const FRAME_OVERHEAD: usize = 13;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AirtimeError {
    #[error("spreading factor {0} outside 7..=12")]
    SpreadingFactor(u8),
    #[error("bandwidth {0} Hz not one of 125000, 250000, 500000")]
    Bandwidth(u32),
    #[error("coding rate denominator {0} outside 5..=8")]
    CodingRate(u8),
    #[error("physical payload of {0} bytes exceeds {MAX_PHY_PAYLOAD}")]
    PayloadTooLong(usize),
    #[error("data rate DR{0} outside DR0..=DR5")]
    DataRate(u8),
}

/// Low data rate optimization setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ldro {
    #[default]
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadioParams {
    pub sf: u8,
    pub bw_hz: u32,
    /// 5..=8, meaning 4/5..4/8.
    pub cr_denominator: u8,
    pub preamble_symbols: u16,
    pub explicit_header: bool,
    pub ldro: Ldro,
    pub crc_on: bool,
}

impl Default for RadioParams {
    fn default() -> Self {
        Self {
            sf: 7,
            bw_hz: 125_000,
            cr_denominator: 5,
            preamble_symbols: 8,
            explicit_header: true,
            ldro: Ldro::Auto,
            crc_on: true,
        }
    }
}

impl RadioParams {
    pub fn with_sf(sf: u8) -> Self {
        Self {
            sf,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AirtimeError> {
        if !(7..=12).contains(&self.sf) {
            return Err(AirtimeError::SpreadingFactor(self.sf));
        }
        if !matches!(self.bw_hz, 125_000 | 250_000 | 500_000) {
            return Err(AirtimeError::Bandwidth(self.bw_hz));
        }
        if !(5..=8).contains(&self.cr_denominator) {
            return Err(AirtimeError::CodingRate(self.cr_denominator));
        }
        Ok(())
    }

    /// Symbol duration `2^SF / BW`. Exact for every valid parameter set.
    pub fn symbol_duration(&self) -> Micros {
        Micros((1u64 << self.sf) * 1_000_000 / u64::from(self.bw_hz))
    }

    pub fn symbol_duration_ms(&self) -> f64 {
        self.symbol_duration().as_millis_f64()
    }

    /// Resolves `Ldro::Auto`: on iff the symbol lasts at least 16 ms.
    pub fn ldro_enabled(&self) -> bool {
        match self.ldro {
            Ldro::On => true,
            Ldro::Off => false,
            Ldro::Auto => self.symbol_duration() >= Micros::from_millis(16),
        }
    }

    /// Number of payload symbols, including the 8 fixed header symbols.
    pub fn payload_symbols(&self, phy_payload_len: usize) -> u64 {
        let sf = i64::from(self.sf);
        let bits = 8 * phy_payload_len as i64 - 4 * sf
            + 28
            + if self.crc_on { 16 } else { 0 }
            - if self.explicit_header { 0 } else { 20 };
        let de = i64::from(self.ldro_enabled());
        let bits_per_block = 4 * (sf - 2 * de);
        let blocks = if bits > 0 {
            (bits + bits_per_block - 1) / bits_per_block
        } else {
            0
        };
        8 + blocks as u64 * u64::from(self.cr_denominator)
    }

    /// Equivalent bit rate in bit/s, `SF * BW / 2^SF * 4 / CR`.
    pub fn bit_rate(&self) -> f64 {
        f64::from(self.sf) * f64::from(self.bw_hz) / f64::from(1u32 << self.sf) * 4.0
            / f64::from(self.cr_denominator)
    }
}

impl fmt::Display for RadioParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SF{}/{}kHz/CR4-{}",
            self.sf,
            self.bw_hz / 1000,
            self.cr_denominator
        )
    }
}

pub fn symbol_duration(params: &RadioParams) -> Result<Micros, AirtimeError> {
    params.validate()?;
    Ok(params.symbol_duration())
}

/// Time on air of a frame with `phy_payload_len` bytes of PHY payload.
pub fn time_on_air(params: &RadioParams, phy_payload_len: usize) -> Result<Micros, AirtimeError> {
    params.validate()?;
    if phy_payload_len > MAX_PHY_PAYLOAD {
        return Err(AirtimeError::PayloadTooLong(phy_payload_len));
    }
    // (preamble + 4.25 + payload) symbols, counted in quarter symbols.
    let quarter_symbols = 4 * u64::from(params.preamble_symbols)
        + 17
        + 4 * params.payload_symbols(phy_payload_len);
    Ok(Micros(quarter_symbols * params.symbol_duration().0 / 4))
}

/// EU868 data rate index; DR0 is SF12 and DR5 is SF7, both at 125 kHz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct DataRate(u8);

impl DataRate {
    pub const DR0: DataRate = DataRate(0);
    pub const DR3: DataRate = DataRate(3);
    pub const DR5: DataRate = DataRate(5);

    pub fn new(dr: u8) -> Result<Self, AirtimeError> {
        if dr <= 5 {
            Ok(DataRate(dr))
        } else {
            Err(AirtimeError::DataRate(dr))
        }
    }

    pub fn all() -> impl DoubleEndedIterator<Item = DataRate> {
        (0..=5).map(DataRate)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn sf(self) -> u8 {
        12 - self.0
    }

    pub fn from_sf(sf: u8) -> Result<Self, AirtimeError> {
        if (7..=12).contains(&sf) {
            Ok(DataRate(12 - sf))
        } else {
            Err(AirtimeError::SpreadingFactor(sf))
        }
    }

    pub fn params(self) -> RadioParams {
        RadioParams::with_sf(self.sf())
    }

    /// Largest application payload accepted at this data rate.
    pub fn max_app_payload(self) -> usize {
        match self.0 {
            0..=2 => 51,
            3 => 115,
            _ => 242,
        }
    }
}

impl TryFrom<u8> for DataRate {
    type Error = AirtimeError;
    fn try_from(value: u8) -> Result<Self, Self::Error> {
        DataRate::new(value)
    }
}

impl From<DataRate> for u8 {
    fn from(dr: DataRate) -> u8 {
        dr.0
    }
}

impl fmt::Display for DataRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DR{}", self.0)
    }
}

pub fn dr_to_params(dr: u8) -> Result<RadioParams, AirtimeError> {
    Ok(DataRate::new(dr)?.params())
}

pub fn max_app_payload(dr: DataRate) -> usize {
    dr.max_app_payload()
}
