//! Network simulation: scenarios, the event engine and run statistics.

mod engine;
pub mod presets;
mod scenario;
mod stats;
mod transmission;

pub use presets::preset;
pub use engine::{labels, run, Fate, Reception, RunOutput};
pub use scenario::{
    Backhaul, GatewayConfig, NodeConfig, Payload, Scenario, ValidationError, Violation,
};
pub use stats::{node_stats_from_log, GatewayStats, NodeStats, RunStats, Summary};
pub use transmission::Transmission;
