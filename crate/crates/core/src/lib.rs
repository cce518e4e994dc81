//! Simulation and planning toolkit for LoRaWAN smart-metering deployments.
//!
//! The crate covers time-on-air and duty-cycle arithmetic, an indoor/outdoor
//! link model, a LoRaWAN MAC with Class A/B/C receive behaviour, a
//! deduplicating network server with a JSONL packet log, a deterministic
//! discrete-event simulator and closed-form capacity planning.

pub mod airtime;
pub mod batch;
pub mod codec;
pub mod link;
pub mod mac;
pub mod planner;
pub mod regulation;
pub mod rng;
pub mod server;
pub mod sim;
pub mod time;

pub use airtime::{time_on_air, DataRate, RadioParams};
pub use regulation::{DutyCycle, DutyLedger};
pub use time::Micros;
