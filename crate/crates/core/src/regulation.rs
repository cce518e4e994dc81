//! EU868 channel plan, duty-cycle accounting and ERP limits.
//!
//! A [`DutyLedger`] belongs to one transmitter (an end-node or a gateway). It
//! enforces two rules per accounting key (a sub-band, or a single channel in
//! [`DutyMode::PerChannel`]):
//!
//! * after a transmission of length `toa` the key stays closed for
//!   `toa * (1/duty - 1)` (the off-time), and
//! * the airtime of all transmissions that started inside any sliding window
//!   of length `window` never exceeds `duty * window`.
//!
//! The off-time rule alone bounds any window by `duty * window` plus one
//! in-flight packet; the window rule removes that slack.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Micros;

/// Fraction of time a transmitter may occupy a sub-band, in parts per million.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DutyCycle(u32);

impl DutyCycle {
    pub const ONE_PERCENT: DutyCycle = DutyCycle(10_000);
    pub const TENTH_PERCENT: DutyCycle = DutyCycle(1_000);
    pub const TEN_PERCENT: DutyCycle = DutyCycle(100_000);
    pub const FULL: DutyCycle = DutyCycle(1_000_000);

    pub fn from_ppm(ppm: u32) -> Result<Self, RegulationError> {
        if ppm == 0 || ppm > 1_000_000 {
            return Err(RegulationError::InvalidDuty(f64::from(ppm) / 1e6));
        }
        Ok(DutyCycle(ppm))
    }

    /// Rounds to the nearest part per million.
    pub fn from_fraction(fraction: f64) -> Result<Self, RegulationError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(RegulationError::InvalidDuty(fraction));
        }
        let ppm = (fraction * 1e6).round() as u32;
        Self::from_ppm(ppm).map_err(|_| RegulationError::InvalidDuty(fraction))
    }

    pub fn ppm(self) -> u32 {
        self.0
    }

    pub fn as_fraction(self) -> f64 {
        f64::from(self.0) / 1e6
    }

    pub fn as_ratio(self) -> Ratio<u128> {
        Ratio::new(u128::from(self.0), 1_000_000)
    }

    /// Airtime budget inside a window of the given length (rounded down).
    pub fn budget(self, window: Micros) -> Micros {
        Micros((u128::from(window.0) * u128::from(self.0) / 1_000_000) as u64)
    }
}

impl TryFrom<f64> for DutyCycle {
    type Error = RegulationError;
    fn try_from(value: f64) -> Result<Self, Self::Error> {
        DutyCycle::from_fraction(value)
    }
}

impl From<DutyCycle> for f64 {
    fn from(d: DutyCycle) -> f64 {
        d.as_fraction()
    }
}

impl fmt::Display for DutyCycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.as_fraction() * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegulationError {
    #[error("duty cycle {0} outside (0, 1]")]
    InvalidDuty(f64),
    #[error("{toa} of airtime exceeds the {budget} budget of sub-band {key}")]
    ExceedsBudget {
        key: String,
        toa: Micros,
        budget: Micros,
    },
    #[error("{freq_hz} Hz is not part of the channel plan")]
    UnknownChannel { freq_hz: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channel {
    pub center_freq_hz: u32,
    pub bw_hz: u32,
    pub sub_band_id: String,
    pub duty_cycle: DutyCycle,
    pub max_erp_dbm: f64,
    #[serde(default)]
    pub mandatory: bool,
}

impl Channel {
    fn new(freq_hz: u32, sub_band: &str, duty: DutyCycle, erp: f64, mandatory: bool) -> Self {
        Self {
            center_freq_hz: freq_hz,
            bw_hz: 125_000,
            sub_band_id: sub_band.to_owned(),
            duty_cycle: duty,
            max_erp_dbm: erp,
            mandatory,
        }
    }

    pub fn freq_mhz(&self) -> f64 {
        f64::from(self.center_freq_hz) / 1e6
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} MHz", self.freq_mhz())
    }
}

/// Regulatory table for EU868 LoRaWAN: the three mandatory 1 % channels, the
/// two 0.1 % channels and the 10 % / 27 dBm channel, in that order.
pub fn eu868_plan() -> Vec<Channel> {
    use DutyCycle as D;
    vec![
        Channel::new(868_100_000, "g1", D::ONE_PERCENT, 14.0, true),
        Channel::new(868_300_000, "g1", D::ONE_PERCENT, 14.0, true),
        Channel::new(868_500_000, "g1", D::ONE_PERCENT, 14.0, true),
        Channel::new(868_850_000, "g2", D::TENTH_PERCENT, 14.0, false),
        Channel::new(869_050_000, "g2", D::TENTH_PERCENT, 14.0, false),
        Channel::new(869_525_000, "g3", D::TEN_PERCENT, 27.0, false),
    ]
}

/// The five supporting uplink channels a joined device adds to the mandatory
/// three (867.1 to 867.9 MHz, ETSI band g at 1 %).
pub fn eu868_supporting_channels() -> Vec<Channel> {
    (0..5)
        .map(|i| Channel::new(867_100_000 + i * 200_000, "g", DutyCycle::ONE_PERCENT, 14.0, false))
        .collect()
}

pub const RX2_FREQ_HZ: u32 = 869_525_000;

/// Channels known to a region: regulatory rows plus supporting uplink channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPlan {
    pub channels: Vec<Channel>,
}

impl Default for ChannelPlan {
    fn default() -> Self {
        Self::eu868()
    }
}

impl ChannelPlan {
    pub fn eu868() -> Self {
        let mut channels = eu868_plan();
        channels.extend(eu868_supporting_channels());
        Self { channels }
    }

    pub fn get(&self, freq_hz: u32) -> Option<&Channel> {
        self.channels.iter().find(|c| c.center_freq_hz == freq_hz)
    }

    pub fn channel(&self, freq_hz: u32) -> Result<&Channel, RegulationError> {
        self.get(freq_hz)
            .ok_or(RegulationError::UnknownChannel { freq_hz })
    }

    pub fn mandatory(&self) -> Vec<&Channel> {
        self.channels.iter().filter(|c| c.mandatory).collect()
    }

    /// Uplink channels before a join completes: the mandatory set only.
    pub fn join_channels(&self) -> Vec<&Channel> {
        self.mandatory()
    }

    /// Uplink channels of an activated device: mandatory plus supporting (band g).
    pub fn uplink_channels(&self) -> Vec<&Channel> {
        self.channels
            .iter()
            .filter(|c| c.mandatory || c.sub_band_id == "g")
            .collect()
    }

    pub fn rx2(&self) -> Result<&Channel, RegulationError> {
        self.channel(RX2_FREQ_HZ)
    }
}

/// `toa * (1/duty - 1)`, rounded up to the next microsecond.
pub fn wait_after(toa: Micros, duty: DutyCycle) -> Micros {
    let ppm = u128::from(duty.0);
    let num = u128::from(toa.0) * (1_000_000 - ppm);
    Micros(num.div_ceil(ppm) as u64)
}

/// Exact rational wait in microseconds.
pub fn wait_after_exact(toa: Micros, duty: DutyCycle) -> Ratio<u128> {
    Ratio::from_integer(u128::from(toa.0)) * (Ratio::from_integer(1) / duty.as_ratio() - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErpViolation {
    pub freq_hz: u32,
    pub excess_db: f64,
}

impl fmt::Display for ErpViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} MHz exceeded by {} dB",
            f64::from(self.freq_hz) / 1e6,
            self.excess_db
        )
    }
}

pub fn check_erp(tx_power_dbm: f64, channel: &Channel) -> Result<(), ErpViolation> {
    if tx_power_dbm <= channel.max_erp_dbm {
        Ok(())
    } else {
        Err(ErpViolation {
            freq_hz: channel.center_freq_hz,
            excess_db: tx_power_dbm - channel.max_erp_dbm,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DutyMode {
    #[default]
    PerSubBand,
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DutyRecord {
    pub start: Micros,
    pub toa: Micros,
    /// End of the off-time that follows this transmission.
    pub closed_until: Micros,
}

#[derive(Debug, Clone)]
pub struct DutyLedger {
    window: Micros,
    mode: DutyMode,
    keys: BTreeMap<String, Vec<DutyRecord>>,
}

impl Default for DutyLedger {
    fn default() -> Self {
        Self::new(DutyMode::PerSubBand)
    }
}

impl DutyLedger {
    pub const DEFAULT_WINDOW: Micros = Micros::from_secs(3600);

    pub fn new(mode: DutyMode) -> Self {
        Self::with_window(mode, Self::DEFAULT_WINDOW)
    }

    pub fn with_window(mode: DutyMode, window: Micros) -> Self {
        Self {
            window,
            mode,
            keys: BTreeMap::new(),
        }
    }

    pub fn window(&self) -> Micros {
        self.window
    }

    pub fn mode(&self) -> DutyMode {
        self.mode
    }

    /// Accounting key of a channel under the current mode.
    pub fn key(&self, channel: &Channel) -> String {
        match self.mode {
            DutyMode::PerSubBand => channel.sub_band_id.clone(),
            DutyMode::PerChannel => channel.center_freq_hz.to_string(),
        }
    }

    /// Recorded transmissions for an accounting key, ordered by start.
    pub fn records(&self, key: &str) -> &[DutyRecord] {
        self.keys.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Earliest start `>= t` at which `toa` fits on `channel`; records nothing.
    ///
    /// Reservations may sit later than `t` (a gateway plans downlinks ahead),
    /// so a candidate must also leave room for the off-time before the next
    /// recorded start and keep every window that ends after it within budget.
    pub fn earliest_start(
        &self,
        channel: &Channel,
        t: Micros,
        toa: Micros,
    ) -> Result<Micros, RegulationError> {
        let key = self.key(channel);
        let budget = channel.duty_cycle.budget(self.window);
        if toa > budget {
            return Err(RegulationError::ExceedsBudget { key, toa, budget });
        }
        let records = self.records(&key);
        let own_off = toa + wait_after(toa, channel.duty_cycle);
        let mut candidate = t;
        'search: loop {
            let split = records.partition_point(|r| r.start <= candidate);
            let (before, after) = records.split_at(split);

            if let Some(blocked) = before
                .iter()
                .map(|r| r.closed_until)
                .filter(|&c| c > candidate)
                .max()
            {
                candidate = blocked;
                continue;
            }
            if let Some(next) = after.first() {
                if next.start < candidate + own_off {
                    candidate = next.closed_until;
                    continue;
                }
            }

            // Window ending at the candidate itself.
            let used: u64 = before
                .iter()
                .filter(|r| r.start + self.window > candidate)
                .map(|r| r.toa.0)
                .sum();
            if used + toa.0 > budget.0 {
                let mut over = used + toa.0 - budget.0;
                for r in before.iter().filter(|r| r.start + self.window > candidate) {
                    if over <= r.toa.0 {
                        candidate = r.start + self.window;
                        continue 'search;
                    }
                    over -= r.toa.0;
                }
                unreachable!("window overflow must be covered by in-window records");
            }
            // Windows ending at later recorded starts that would contain the candidate.
            for (i, end) in after.iter().enumerate() {
                if end.start >= candidate + self.window {
                    break;
                }
                let used: u64 = records[..split + i + 1]
                    .iter()
                    .filter(|r| r.start + self.window > end.start)
                    .map(|r| r.toa.0)
                    .sum();
                if used + toa.0 > budget.0 {
                    candidate = end.closed_until;
                    continue 'search;
                }
            }
            return Ok(candidate);
        }
    }

    /// Like [`earliest_start`](Self::earliest_start), then records the transmission there.
    pub fn try_reserve(
        &mut self,
        channel: &Channel,
        t: Micros,
        toa: Micros,
    ) -> Result<Micros, RegulationError> {
        let start = self.earliest_start(channel, t, toa)?;
        self.record(channel, start, toa);
        Ok(start)
    }

    /// True if a transmission of `toa` may start exactly at `t`.
    pub fn admits_at(&self, channel: &Channel, t: Micros, toa: Micros) -> bool {
        matches!(self.earliest_start(channel, t, toa), Ok(s) if s == t)
    }

    /// Records a transmission without checking it; callers go through
    /// `earliest_start` first.
    pub fn record(&mut self, channel: &Channel, start: Micros, toa: Micros) {
        let key = self.key(channel);
        let closed_until = start + toa + wait_after(toa, channel.duty_cycle);
        let records = self.keys.entry(key).or_default();
        let at = records.partition_point(|r| r.start <= start);
        records.insert(
            at,
            DutyRecord {
                start,
                toa,
                closed_until,
            },
        );
    }

    /// Forgets records that can no longer influence a query at or after `now`.
    pub fn prune(&mut self, now: Micros) {
        let window = self.window;
        for records in self.keys.values_mut() {
            let keep_from = records
                .iter()
                .position(|r| r.start + window > now || r.closed_until > now)
                .unwrap_or(records.len());
            records.drain(..keep_from);
        }
    }
}

/// One past transmission, for auditing a finished run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AirtimeEntry {
    pub transmitter: String,
    pub freq_hz: u32,
    pub start: Micros,
    pub toa: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DutyRule {
    OffTime,
    Window,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DutyViolation {
    pub transmitter: String,
    pub key: String,
    pub start: Micros,
    pub rule: DutyRule,
}

impl fmt::Display for DutyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} on {} at {}: {:?}",
            self.transmitter, self.key, self.start, self.rule
        )
    }
}

/// Replays `entries` and reports every transmission that breaks the off-time
/// or sliding-window rule for its transmitter and accounting key.
pub fn audit(
    plan: &ChannelPlan,
    mode: DutyMode,
    window: Micros,
    entries: &[AirtimeEntry],
) -> Result<Vec<DutyViolation>, RegulationError> {
    let keyer = DutyLedger::with_window(mode, window);
    type Group = (DutyCycle, Vec<(Micros, Micros)>);
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    for e in entries {
        let ch = plan.channel(e.freq_hz)?;
        groups
            .entry((e.transmitter.clone(), keyer.key(ch)))
            .or_insert_with(|| (ch.duty_cycle, Vec::new()))
            .1
            .push((e.start, e.toa));
    }
    let mut out = Vec::new();
    for ((transmitter, key), (duty, mut txs)) in groups {
        txs.sort();
        let budget = duty.budget(window);
        let mut violation = |start, rule| {
            out.push(DutyViolation {
                transmitter: transmitter.clone(),
                key: key.clone(),
                start,
                rule,
            })
        };
        let mut lo = 0;
        let mut used = 0u64;
        for (i, &(start, toa)) in txs.iter().enumerate() {
            if i > 0 {
                let (ps, pt) = txs[i - 1];
                if start < ps + pt + wait_after(pt, duty) {
                    violation(start, DutyRule::OffTime);
                }
            }
            used += toa.0;
            while txs[lo].0 + window <= start {
                used -= txs[lo].1 .0;
                lo += 1;
            }
            if used > budget.0 {
                violation(start, DutyRule::Window);
            }
        }
    }
    Ok(out)
}
