//! Radio link model: log-distance path loss with floor, wall and basement
//! penalties, frozen log-normal shadowing, RSSI/SNR, the per-packet reception
//! decision and the co-channel collision rule.
//!
//! The antenna gain curve is an empirical fit to a field observation (best
//! signal at a 3 dBi setting, falling off symmetrically on either side); it is
//! not an antenna pattern model.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, SimRng};
use crate::sim::Transmission;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkError {
    #[error("endpoints coincide; path loss needs a positive distance")]
    ZeroDistance,
    #[error("antenna gain setting {0} dBi outside -128..=127")]
    GainSetting(i32),
    #[error("spreading factor {0} outside 7..=12")]
    SpreadingFactor(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    /// Height in metres; floors are bands of z.
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2))
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Environment {
    pub path_loss_exponent: f64,
    /// Loss at 1 m.
    pub reference_loss_db: f64,
    /// Per concrete slab between the endpoints.
    pub floor_penetration_db: f64,
    pub wall_penetration_db: f64,
    pub basement_extra_db: f64,
    /// Log-normal shadowing, frozen per link for a run.
    pub shadowing_sigma_db: f64,
    /// Per-packet Gaussian fading on top of shadowing; zero disables it.
    pub fading_sigma_db: f64,
}

impl Default for Environment {
    fn default() -> Self {
        Self::indoor()
    }
}

impl Environment {
    pub fn indoor() -> Self {
        Self {
            path_loss_exponent: 2.9,
            reference_loss_db: 40.0,
            floor_penetration_db: 15.0,
            wall_penetration_db: 5.0,
            basement_extra_db: 20.0,
            shadowing_sigma_db: 2.0,
            fading_sigma_db: 0.0,
        }
    }

    pub fn outdoor() -> Self {
        Self {
            path_loss_exponent: 2.2,
            ..Self::indoor()
        }
    }

    /// Names of negative or non-finite attenuation terms.
    pub fn invalid_terms(&self) -> Vec<&'static str> {
        [
            ("path_loss_exponent", self.path_loss_exponent),
            ("reference_loss_db", self.reference_loss_db),
            ("floor_penetration_db", self.floor_penetration_db),
            ("wall_penetration_db", self.wall_penetration_db),
            ("basement_extra_db", self.basement_extra_db),
            ("shadowing_sigma_db", self.shadowing_sigma_db),
            ("fading_sigma_db", self.fading_sigma_db),
        ]
        .into_iter()
        .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
        .map(|(name, _)| name)
        .collect()
    }
}

/// Obstructions between two positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Obstacles {
    pub floors: u32,
    pub walls: u32,
    pub basement: bool,
}

/// Median path loss in dB (no shadowing).
pub fn path_loss(
    env: &Environment,
    a: &Position,
    b: &Position,
    obstacles: &Obstacles,
) -> Result<f64, LinkError> {
    let d = a.distance(b);
    if !(d > 0.0) {
        return Err(LinkError::ZeroDistance);
    }
    Ok(env.reference_loss_db
        + 10.0 * env.path_loss_exponent * d.log10()
        + f64::from(obstacles.floors) * env.floor_penetration_db
        + f64::from(obstacles.walls) * env.wall_penetration_db
        + if obstacles.basement {
            env.basement_extra_db
        } else {
            0.0
        })
}

/// Frozen shadowing for a link: a deterministic function of the run seed,
/// the gateway and the node's position, so co-located devices share it.
pub fn shadowing_db(env: &Environment, seed: u64, gateway_id: u32, node: &Position) -> f64 {
    if env.shadowing_sigma_db == 0.0 {
        return 0.0;
    }
    let mut rng = rng::stream(
        seed,
        &[
            rng::tag::SHADOWING,
            u64::from(gateway_id),
            node.x.to_bits(),
            node.y.to_bits(),
            node.z.to_bits(),
        ],
    );
    gaussian(&mut rng, env.shadowing_sigma_db)
}

pub(crate) fn gaussian(rng: &mut SimRng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("sigma validated as finite and non-negative").sample(rng)
}

pub const GAIN_SETTING_RANGE: std::ops::RangeInclusive<i32> = -128..=127;

/// Gain an antenna setting actually contributes in an arbitrary direction:
/// `3 - |setting - 3|`, floored at -30 dB.
pub fn effective_antenna_gain(gain_setting_dbi: i32) -> Result<f64, LinkError> {
    if !GAIN_SETTING_RANGE.contains(&gain_setting_dbi) {
        return Err(LinkError::GainSetting(gain_setting_dbi));
    }
    Ok((3.0 - f64::from((gain_setting_dbi - 3).abs())).max(-30.0))
}

pub fn rssi(tx_power_dbm: f64, tx_gain_db: f64, rx_gain_db: f64, loss_db: f64) -> f64 {
    tx_power_dbm + tx_gain_db + rx_gain_db - loss_db
}

/// RSSI as a radio reports it: whole dBm.
pub fn reported_rssi(rssi_dbm: f64) -> i32 {
    rssi_dbm.round() as i32
}

pub const SNR_REPORT_MIN: f64 = -25.0;
pub const SNR_REPORT_MAX: f64 = 12.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snr {
    pub true_db: f64,
    pub reported_db: f64,
}

pub fn noise_floor_dbm(bw_hz: u32, noise_figure_db: f64) -> f64 {
    -174.0 + 10.0 * f64::from(bw_hz).log10() + noise_figure_db
}

pub fn snr(rssi_dbm: f64, bw_hz: u32, noise_figure_db: f64) -> Snr {
    let true_db = rssi_dbm - noise_floor_dbm(bw_hz, noise_figure_db);
    Snr {
        true_db,
        reported_db: true_db.clamp(SNR_REPORT_MIN, SNR_REPORT_MAX),
    }
}

/// Receiver sensitivity, `-(117 + 2.5 (SF - 7))` dBm.
pub fn sensitivity_dbm(sf: u8) -> f64 {
    -(117.0 + 2.5 * f64::from(sf - 7))
}

/// Lowest SNR at which a frame still demodulates.
pub fn demod_floor_db(sf: u8) -> f64 {
    match sf {
        7 => -7.5,
        8 => -10.0,
        9 => -12.5,
        10 => -15.0,
        11 => -17.5,
        _ => -20.0,
    }
}

/// Scale of the logistic demodulation margin.
pub const MARGIN_SCALE_DB: f64 = 2.0;

/// One draw of the per-packet demodulation margin (logistic, mean 0).
pub fn draw_margin(rng: &mut impl Rng) -> f64 {
    // Inverse CDF; the open interval keeps ln finite.
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    MARGIN_SCALE_DB * (u / (1.0 - u)).ln()
}

/// True if a frame at this RSSI/SNR is demodulated. Draws one margin.
pub fn receive_decision(
    rssi_dbm: f64,
    true_snr_db: f64,
    sf: u8,
    rng: &mut impl Rng,
) -> Result<bool, LinkError> {
    if !(7..=12).contains(&sf) {
        return Err(LinkError::SpreadingFactor(sf));
    }
    let margin = draw_margin(rng);
    Ok(decide(rssi_dbm, true_snr_db, sf, margin))
}

pub(crate) fn decide(rssi_dbm: f64, true_snr_db: f64, sf: u8, margin: f64) -> bool {
    rssi_dbm >= sensitivity_dbm(sf) && true_snr_db >= demod_floor_db(sf) + margin
}

/// Probability that [`receive_decision`] succeeds, from the logistic CDF.
pub fn success_probability(rssi_dbm: f64, true_snr_db: f64, sf: u8) -> f64 {
    if rssi_dbm < sensitivity_dbm(sf) {
        return 0.0;
    }
    let x = (true_snr_db - demod_floor_db(sf)) / MARGIN_SCALE_DB;
    1.0 / (1.0 + (-x).exp())
}

/// Same channel, same SF and overlapping air intervals. No capture effect.
pub fn collide(a: &Transmission, b: &Transmission) -> bool {
    a.id != b.id
        && a.channel_hz == b.channel_hz
        && a.sf == b.sf
        && a.start < b.end()
        && b.start < a.end()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSample {
    pub rssi_dbm: f64,
    pub snr_db: f64,
    pub received: bool,
    pub collided: bool,
}

/// Largest distance at which a clear link still meets the sensitivity of `sf`.
pub fn coverage_radius_m(env: &Environment, sf: u8, link_gain_db: f64) -> f64 {
    // link_gain = tx power + both antenna terms; loss budget = gain - sensitivity.
    let budget = link_gain_db - sensitivity_dbm(sf) - env.reference_loss_db;
    10f64.powf(budget / (10.0 * env.path_loss_exponent))
}
