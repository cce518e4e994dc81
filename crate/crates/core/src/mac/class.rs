//! Downlink availability of Class A, B and C devices.
//!
//! Each device is a small state machine driven by [`DeviceEvent`]s. A downlink
//! is delivered when it starts inside a slot the device is listening in and
//! the device is not transmitting at that moment.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::airtime::DataRate;
use crate::regulation::RX2_FREQ_HZ;
use crate::rng;
use crate::time::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum DeviceClass {
    #[default]
    A,
    B,
    C,
}

impl fmt::Display for DeviceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

pub const RX1_DELAY: Micros = Micros::from_secs(1);
pub const RX2_DELAY: Micros = Micros::from_secs(2);
pub const RX2_DR: DataRate = DataRate::DR0;
pub const JOIN_ACCEPT_DELAY1: Micros = Micros::from_secs(5);
pub const JOIN_ACCEPT_DELAY2: Micros = Micros::from_secs(6);
/// Preamble symbols a receiver waits for before closing a window.
pub const RX_WINDOW_SYMBOLS: u64 = 8;

pub const BEACON_PERIOD: Micros = Micros::from_secs(128);
pub const BEACON_RESERVED: Micros = Micros::from_millis(2_120);
pub const PING_SLOT_LEN: Micros = Micros::from_millis(30);
pub const SLOTS_PER_BEACON: u64 = 4096;
pub const DEFAULT_PING_NB: u16 = 32;

/// One receive opportunity: a downlink must start in `[opens, closes)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RxWindow {
    pub opens: Micros,
    pub closes: Micros,
    pub freq_hz: u32,
    pub dr: DataRate,
}

impl RxWindow {
    pub fn new(opens: Micros, freq_hz: u32, dr: DataRate) -> Self {
        let len = Micros(dr.params().symbol_duration().0 * RX_WINDOW_SYMBOLS);
        Self {
            opens,
            closes: opens + len,
            freq_hz,
            dr,
        }
    }

    pub fn contains(&self, start: Micros, freq_hz: u32, dr: DataRate) -> bool {
        self.freq_hz == freq_hz && self.dr == dr && self.opens <= start && start < self.closes
    }
}

/// RX1 on the uplink channel and data rate, RX2 on the fixed channel at DR0.
pub fn rx_windows(uplink_end: Micros, uplink_freq_hz: u32, uplink_dr: DataRate) -> [RxWindow; 2] {
    [
        RxWindow::new(uplink_end + RX1_DELAY, uplink_freq_hz, uplink_dr),
        RxWindow::new(uplink_end + RX2_DELAY, RX2_FREQ_HZ, RX2_DR),
    ]
}

/// Join-accept windows: as [`rx_windows`] but 5 s and 6 s after the request.
pub fn join_windows(request_end: Micros, freq_hz: u32, dr: DataRate) -> [RxWindow; 2] {
    [
        RxWindow::new(request_end + JOIN_ACCEPT_DELAY1, freq_hz, dr),
        RxWindow::new(request_end + JOIN_ACCEPT_DELAY2, RX2_FREQ_HZ, RX2_DR),
    ]
}

pub fn beacon_start(t: Micros) -> Micros {
    Micros(t.0 / BEACON_PERIOD.0 * BEACON_PERIOD.0)
}

/// Slot offset within the ping period, derived from the beacon time and
/// the device address so every party computes the same schedule.
pub fn ping_offset(beacon: Micros, dev_addr: u32, ping_nb: u16) -> u64 {
    let period = SLOTS_PER_BEACON / u64::from(ping_nb.max(1));
    rng::derive_seed(beacon.0, &[rng::tag::BEACON, u64::from(dev_addr)]) % period
}

/// Start times of the ping slots following the beacon at `beacon`.
pub fn ping_slots(beacon: Micros, dev_addr: u32, ping_nb: u16) -> impl Iterator<Item = Micros> {
    let nb = u64::from(ping_nb.max(1));
    let period = SLOTS_PER_BEACON / nb;
    let offset = ping_offset(beacon, dev_addr, ping_nb);
    (0..nb).map(move |k| beacon + BEACON_RESERVED + Micros((offset + k * period) * PING_SLOT_LEN.0))
}

/// First ping slot starting at or after `t`.
pub fn next_ping_slot(t: Micros, dev_addr: u32, ping_nb: u16) -> Micros {
    let mut beacon = beacon_start(t);
    loop {
        if let Some(s) = ping_slots(beacon, dev_addr, ping_nb).find(|&s| s >= t) {
            return s;
        }
        beacon += BEACON_PERIOD;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceEvent {
    /// Radio starts transmitting for `toa`.
    UplinkStart { at: Micros, toa: Micros },
    /// Uplink finished on this channel and data rate.
    UplinkDone { end: Micros, freq_hz: u32, dr: DataRate },
    /// A join request finished; the join-accept windows open.
    JoinRequestDone { end: Micros, freq_hz: u32, dr: DataRate },
    /// A gateway begins a downlink to this device.
    Downlink { start: Micros, freq_hz: u32, dr: DataRate },
    /// Beacon slot at `at`; `heard` is false when the beacon was lost.
    Beacon { at: Micros, heard: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissReason {
    Transmitting,
    NoWindow,
    WrongChannel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Idle,
    WindowsOpened([RxWindow; 2]),
    Delivered,
    Missed(MissReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceState {
    pub class: DeviceClass,
    pub dev_addr: u32,
    pub ping_nb: u16,
    tx: Option<(Micros, Micros)>,
    windows: Vec<RxWindow>,
    /// Beacon period in which the device is synchronised, if any.
    synced_beacon: Option<Micros>,
}

impl DeviceState {
    pub fn new(class: DeviceClass, dev_addr: u32) -> Self {
        Self {
            class,
            dev_addr,
            ping_nb: DEFAULT_PING_NB,
            tx: None,
            windows: Vec::new(),
            synced_beacon: None,
        }
    }

    pub fn is_transmitting(&self, t: Micros) -> bool {
        matches!(self.tx, Some((s, e)) if s <= t && t < e)
    }

    pub fn open_windows(&self) -> &[RxWindow] {
        &self.windows
    }

    /// Whether ping slots are usable at `t` (synchronised to the current beacon).
    pub fn beacon_locked(&self, t: Micros) -> bool {
        self.synced_beacon == Some(beacon_start(t))
    }

    pub fn step(&mut self, event: DeviceEvent) -> Outcome {
        match self.class {
            DeviceClass::A => class_a_step(self, event),
            DeviceClass::B => class_b_step(self, event),
            DeviceClass::C => class_c_step(self, event),
        }
    }

    fn common(&mut self, event: DeviceEvent) -> Option<Outcome> {
        match event {
            DeviceEvent::UplinkStart { at, toa } => {
                self.tx = Some((at, at + toa));
                Some(Outcome::Idle)
            }
            DeviceEvent::UplinkDone { end, freq_hz, dr } => {
                let w = rx_windows(end, freq_hz, dr);
                self.windows = w.to_vec();
                Some(Outcome::WindowsOpened(w))
            }
            DeviceEvent::JoinRequestDone { end, freq_hz, dr } => {
                let w = join_windows(end, freq_hz, dr);
                self.windows = w.to_vec();
                Some(Outcome::WindowsOpened(w))
            }
            DeviceEvent::Downlink { start, .. } if self.is_transmitting(start) => {
                Some(Outcome::Missed(MissReason::Transmitting))
            }
            _ => None,
        }
    }

    fn in_rx_window(&mut self, start: Micros, freq_hz: u32, dr: DataRate) -> bool {
        let hit = self.windows.iter().any(|w| w.contains(start, freq_hz, dr));
        if hit {
            // A received downlink closes the remaining windows.
            self.windows.clear();
        }
        hit
    }
}

pub fn class_a_step(state: &mut DeviceState, event: DeviceEvent) -> Outcome {
    if let Some(o) = state.common(event) {
        return o;
    }
    match event {
        DeviceEvent::Downlink { start, freq_hz, dr } => {
            if state.in_rx_window(start, freq_hz, dr) {
                Outcome::Delivered
            } else {
                Outcome::Missed(MissReason::NoWindow)
            }
        }
        _ => Outcome::Idle,
    }
}

pub fn class_b_step(state: &mut DeviceState, event: DeviceEvent) -> Outcome {
    if let Some(o) = state.common(event) {
        return o;
    }
    match event {
        DeviceEvent::Beacon { at, heard } => {
            state.synced_beacon = heard.then(|| beacon_start(at));
            Outcome::Idle
        }
        DeviceEvent::Downlink { start, freq_hz, dr } => {
            if state.in_rx_window(start, freq_hz, dr) {
                return Outcome::Delivered;
            }
            if !state.beacon_locked(start) {
                return Outcome::Missed(MissReason::NoWindow);
            }
            if freq_hz != RX2_FREQ_HZ || dr != RX2_DR {
                return Outcome::Missed(MissReason::WrongChannel);
            }
            let in_slot = ping_slots(beacon_start(start), state.dev_addr, state.ping_nb)
                .any(|s| s <= start && start < s + PING_SLOT_LEN);
            if in_slot {
                Outcome::Delivered
            } else {
                Outcome::Missed(MissReason::NoWindow)
            }
        }
        _ => Outcome::Idle,
    }
}

pub fn class_c_step(state: &mut DeviceState, event: DeviceEvent) -> Outcome {
    if let Some(o) = state.common(event) {
        return o;
    }
    match event {
        DeviceEvent::Downlink { start, freq_hz, dr } => {
            if state.in_rx_window(start, freq_hz, dr) || (freq_hz == RX2_FREQ_HZ && dr == RX2_DR) {
                Outcome::Delivered
            } else {
                Outcome::Missed(MissReason::WrongChannel)
            }
        }
        _ => Outcome::Idle,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const UP: u32 = 868_100_000;

    fn after_uplink(class: DeviceClass) -> (DeviceState, Micros) {
        let mut s = DeviceState::new(class, 0x2600_0001);
        let toa = Micros(61_696);
        s.step(DeviceEvent::UplinkStart { at: Micros::ZERO, toa });
        s.step(DeviceEvent::UplinkDone {
            end: toa,
            freq_hz: UP,
            dr: DataRate::DR5,
        });
        (s, toa)
    }

    #[test]
    fn rx1_before_rx2() {
        let [r1, r2] = rx_windows(Micros(5), UP, DataRate::DR5);
        assert!(r1.opens < r2.opens);
        assert_eq!(r1.opens, Micros(1_000_005));
        assert_eq!(r2.opens, Micros(2_000_005));
        assert_eq!((r2.freq_hz, r2.dr), (RX2_FREQ_HZ, DataRate::DR0));
    }

    #[test]
    fn class_a_window_timeline() {
        let (s, end) = after_uplink(DeviceClass::A);
        // Enumerate a 12 s timeline in 10 ms steps; only the two windows deliver.
        for ms in 0..12_000u64 {
            let start = end + Micros::from_millis(ms);
            for (freq, dr) in [(UP, DataRate::DR5), (RX2_FREQ_HZ, DataRate::DR0)] {
                let mut probe = s.clone();
                let got = probe.step(DeviceEvent::Downlink {
                    start,
                    freq_hz: freq,
                    dr,
                });
                let w = if freq == UP {
                    (1000, 1000 + 8 * 1024 / 1000)
                } else {
                    (2000, 2000 + 8 * 32768 / 1000)
                };
                let expect = ms >= w.0 && ms <= w.1;
                assert_eq!(got == Outcome::Delivered, expect, "ms={ms} freq={freq}");
            }
        }
    }

    #[test]
    fn class_a_examples() {
        let (s, end) = after_uplink(DeviceClass::A);
        let mut a = s.clone();
        let mid = a.step(DeviceEvent::Downlink {
            start: end + Micros::from_millis(1_500),
            freq_hz: RX2_FREQ_HZ,
            dr: DataRate::DR0,
        });
        assert_eq!(mid, Outcome::Missed(MissReason::NoWindow));
        let mut a = s.clone();
        let rx2 = a.step(DeviceEvent::Downlink {
            start: end + RX2_DELAY,
            freq_hz: RX2_FREQ_HZ,
            dr: DataRate::DR0,
        });
        assert_eq!(rx2, Outcome::Delivered);
        let mut a = s;
        let late = a.step(DeviceEvent::Downlink {
            start: end + Micros::from_secs(10),
            freq_hz: RX2_FREQ_HZ,
            dr: DataRate::DR0,
        });
        assert_eq!(late, Outcome::Missed(MissReason::NoWindow));
    }

    #[test]
    fn class_c_listens_except_while_transmitting() {
        let (mut s, _) = after_uplink(DeviceClass::C);
        let any = s.step(DeviceEvent::Downlink {
            start: Micros::from_secs(777),
            freq_hz: RX2_FREQ_HZ,
            dr: DataRate::DR0,
        });
        assert_eq!(any, Outcome::Delivered);
        s.step(DeviceEvent::UplinkStart {
            at: Micros::from_secs(800),
            toa: Micros::from_secs(1),
        });
        let busy = s.step(DeviceEvent::Downlink {
            start: Micros::from_millis(800_500),
            freq_hz: RX2_FREQ_HZ,
            dr: DataRate::DR0,
        });
        assert_eq!(busy, Outcome::Missed(MissReason::Transmitting));
    }

    #[test]
    fn class_b_ping_slots() {
        let mut s = DeviceState::new(DeviceClass::B, 0x2600_0042);
        let beacon = Micros::from_secs(128 * 10);
        s.step(DeviceEvent::Beacon { at: beacon, heard: true });
        let slot = next_ping_slot(beacon, s.dev_addr, s.ping_nb);
        assert!(slot >= beacon + BEACON_RESERVED);
        let mut hit = s.clone();
        assert_eq!(
            hit.step(DeviceEvent::Downlink {
                start: slot,
                freq_hz: RX2_FREQ_HZ,
                dr: RX2_DR
            }),
            Outcome::Delivered
        );
        let mut between = s.clone();
        assert_eq!(
            between.step(DeviceEvent::Downlink {
                start: slot + Micros::from_millis(45),
                freq_hz: RX2_FREQ_HZ,
                dr: RX2_DR
            }),
            Outcome::Missed(MissReason::NoWindow)
        );
        // Lost beacon: ping slots close, Class A windows still work.
        s.step(DeviceEvent::Beacon {
            at: beacon + BEACON_PERIOD,
            heard: false,
        });
        let next = next_ping_slot(beacon + BEACON_PERIOD, s.dev_addr, s.ping_nb);
        assert_eq!(
            s.step(DeviceEvent::Downlink {
                start: next,
                freq_hz: RX2_FREQ_HZ,
                dr: RX2_DR
            }),
            Outcome::Missed(MissReason::NoWindow)
        );
    }

    #[test]
    fn ping_schedule_shape() {
        let beacon = Micros::from_secs(256);
        let slots: Vec<_> = ping_slots(beacon, 7, 32).collect();
        assert_eq!(slots.len(), 32);
        let period = Micros((4096 / 32) * 30_000);
        for w in slots.windows(2) {
            assert_eq!(w[1] - w[0], period);
        }
        assert!(*slots.last().unwrap() + PING_SLOT_LEN <= beacon + BEACON_PERIOD);
        assert_eq!(next_ping_slot(slots[3], 7, 32), slots[3]);
    }
}
