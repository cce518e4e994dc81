//! Closed-form planning tables: wait time per payload, data per day and
//! gateway node capacity.

use std::io;

use serde::Serialize;
use thiserror::Error;

use crate::airtime::{time_on_air, DataRate, FRAME_OVERHEAD};
use crate::regulation::{wait_after, DutyCycle};
use crate::time::Micros;

const DAY: Micros = Micros::from_secs(86_400);
pub const PAYLOAD_STEP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaitRow {
    pub dr: u8,
    pub payload_bytes: usize,
    pub toa_ms: f64,
    pub wait_s: f64,
}

/// Wait after each frame for payloads `0, 8, 16, ...` up to each data
/// rate's maximum. The maximum itself is always included.
pub fn wait_time_table(duty: DutyCycle) -> Vec<WaitRow> {
    let mut rows = Vec::new();
    for dr in DataRate::all() {
        let max = dr.max_app_payload();
        let mut sizes: Vec<usize> = (0..=max).step_by(PAYLOAD_STEP).collect();
        if sizes.last() != Some(&max) {
            sizes.push(max);
        }
        for payload in sizes {
            let toa = time_on_air(&dr.params(), FRAME_OVERHEAD + payload)
                .expect("maximum payload fits the physical layer");
            rows.push(WaitRow {
                dr: dr.index(),
                payload_bytes: payload,
                toa_ms: toa.as_millis_f64(),
                wait_s: wait_after(toa, duty).as_secs_f64(),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DailyMethod {
    /// Whole maximum-size frames that fit the daily airtime budget.
    #[default]
    Airtime,
    /// Raw bit rate times the daily airtime budget.
    Bitrate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DailyRow {
    pub dr: u8,
    pub payload_bytes: usize,
    pub packets_per_day: u64,
    pub bytes_per_day: u64,
}

pub fn daily_data_table(duty: DutyCycle, method: DailyMethod) -> Vec<DailyRow> {
    let budget = duty.budget(DAY);
    DataRate::all()
        .map(|dr| {
            let payload = dr.max_app_payload();
            let toa = time_on_air(&dr.params(), FRAME_OVERHEAD + payload)
                .expect("maximum payload fits the physical layer");
            let packets = budget.0 / toa.0;
            let bytes = match method {
                DailyMethod::Airtime => packets * payload as u64,
                DailyMethod::Bitrate => {
                    (dr.params().bit_rate() * budget.as_secs_f64() / 8.0).floor() as u64
                }
            };
            DailyRow {
                dr: dr.index(),
                payload_bytes: payload,
                packets_per_day: packets,
                bytes_per_day: bytes,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapacityInputs {
    /// Packets per day requiring a response.
    pub r: u64,
    /// Packets per day from edge nodes requiring a response; these cost double.
    pub er: u64,
    /// Channels (demodulator paths) the gateway serves in parallel.
    pub channels: u64,
    pub seconds_per_transaction: Micros,
}

impl CapacityInputs {
    pub fn new(channels: u64, r: u64, er: u64) -> Self {
        Self {
            r,
            er,
            channels,
            seconds_per_transaction: Micros::from_secs(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlannerError {
    #[error("R + 2*ER must be positive")]
    ZeroLoad,
    #[error("channels must be at least 1")]
    NoChannels,
    #[error("seconds per transaction must be positive")]
    ZeroTransaction,
}

/// `channels * 86400 / seconds_per_transaction / (R + 2 ER)`, floored.
pub fn node_capacity(inputs: CapacityInputs) -> Result<u64, PlannerError> {
    let load = u128::from(inputs.r) + 2 * u128::from(inputs.er);
    if load == 0 {
        return Err(PlannerError::ZeroLoad);
    }
    if inputs.channels == 0 {
        return Err(PlannerError::NoChannels);
    }
    if inputs.seconds_per_transaction == Micros::ZERO {
        return Err(PlannerError::ZeroTransaction);
    }
    let num = u128::from(inputs.channels) * u128::from(DAY.0);
    let den = u128::from(inputs.seconds_per_transaction.0) * load;
    Ok((num / den) as u64)
}

pub fn write_csv<T: Serialize>(rows: &[T], sink: impl io::Write) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wait_table_covers_every_rate_and_maximum() {
        let rows = wait_time_table(DutyCycle::ONE_PERCENT);
        for dr in DataRate::all() {
            let mine: Vec<_> = rows.iter().filter(|r| r.dr == dr.index()).collect();
            assert_eq!(mine[0].payload_bytes, 0);
            assert_eq!(mine.last().unwrap().payload_bytes, dr.max_app_payload());
            assert!(mine.windows(2).all(|w| w[0].wait_s <= w[1].wait_s));
        }
        let dr0_max = rows.iter().find(|r| r.dr == 0 && r.payload_bytes == 51).unwrap();
        assert_eq!(dr0_max.toa_ms, 2793.472);
    }

    #[test]
    fn full_duty_never_waits() {
        assert!(wait_time_table(DutyCycle::FULL).iter().all(|r| r.wait_s == 0.0));
    }

    #[test]
    fn daily_airtime_dr5_and_dr0() {
        let rows = daily_data_table(DutyCycle::ONE_PERCENT, DailyMethod::Airtime);
        let dr5 = rows.iter().find(|r| r.dr == 5).unwrap();
        // 864 s / 399.616 ms = 2162 frames of 242 bytes.
        assert_eq!(dr5.packets_per_day, 2162);
        assert_eq!(dr5.bytes_per_day, 2162 * 242);
        let dr0 = rows.iter().find(|r| r.dr == 0).unwrap();
        assert_eq!(dr0.packets_per_day, 309);
        assert_eq!(dr0.bytes_per_day, 309 * 51);
    }

    #[test]
    fn tiny_duty_sends_nothing() {
        let d = DutyCycle::from_ppm(1).unwrap();
        assert!(daily_data_table(d, DailyMethod::Airtime)
            .iter()
            .all(|r| r.bytes_per_day == 0));
    }

    #[test]
    fn capacity_errors() {
        assert_eq!(node_capacity(CapacityInputs::new(8, 0, 0)), Err(PlannerError::ZeroLoad));
        assert_eq!(node_capacity(CapacityInputs::new(0, 1, 0)), Err(PlannerError::NoChannels));
        assert_eq!(node_capacity(CapacityInputs::new(1, 0, 1)), Ok(21_600));
    }

    #[test]
    fn csv_header_order() {
        let mut out = Vec::new();
        write_csv(&wait_time_table(DutyCycle::FULL)[..1], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("dr,payload_bytes,toa_ms,wait_s"));
    }
}
