//! Scenario files: geometry, traffic and radio environment of one run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::airtime::DataRate;
use crate::link::{self, Environment, Obstacles, Position};
use crate::mac::{Activation, DevEui, DeviceClass};
use crate::regulation::{check_erp, ChannelPlan, DutyMode};

fn default_seed() -> u64 {
    1
}
fn default_retry_limit() -> u8 {
    2
}
fn default_ack_timeout() -> f64 {
    2.0
}
fn default_demodulators() -> usize {
    8
}
fn default_tx_power() -> f64 {
    14.0
}
fn default_gain_setting() -> i32 {
    3
}
fn default_rx_loss() -> f64 {
    3.0
}
fn default_noise_figure() -> f64 {
    6.0
}
fn default_ping_nb() -> u16 {
    crate::mac::class::DEFAULT_PING_NB
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default)]
    pub environment: Environment,
    #[serde(default)]
    pub duty_mode: DutyMode,
    /// Delay between a gateway receiving an uplink and the server acting on it.
    #[serde(default)]
    pub backhaul: Backhaul,
    /// Retransmissions of a confirmed uplink whose ACK did not arrive.
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u8,
    /// How long after RX2 a device keeps waiting for an ACK.
    #[serde(default = "default_ack_timeout")]
    pub ack_timeout_s: f64,
    pub gateways: Vec<GatewayConfig>,
    pub nodes: Vec<NodeConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backhaul {
    pub base_ms: f64,
    /// Mean of an exponential tail added to `base_ms`; zero disables it.
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub id: u32,
    pub position: Position,
    #[serde(default = "default_demodulators")]
    pub demodulators: usize,
    #[serde(default = "default_tx_power")]
    pub tx_power_dbm: f64,
    #[serde(default)]
    pub antenna_gain_db: f64,
    /// Cable and connector loss on the receive path.
    #[serde(default = "default_rx_loss")]
    pub rx_loss_db: f64,
    #[serde(default = "default_noise_figure")]
    pub noise_figure_db: f64,
}

impl GatewayConfig {
    pub fn at(id: u32, position: Position) -> Self {
        Self {
            id,
            position,
            demodulators: default_demodulators(),
            tx_power_dbm: default_tx_power(),
            antenna_gain_db: 0.0,
            rx_loss_db: default_rx_loss(),
            noise_figure_db: default_noise_figure(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Payload {
    /// 96-byte meter datagrams, fragmented where the data rate requires it.
    #[default]
    Meter,
    /// Fixed application bytes, hex encoded.
    Raw(String),
    /// Zero-filled payload of the given length.
    Zeros(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub dev_eui: DevEui,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
    pub position: Position,
    #[serde(default)]
    pub class: DeviceClass,
    #[serde(default)]
    pub activation: Activation,
    pub dr: DataRate,
    #[serde(default = "default_tx_power")]
    pub tx_power_dbm: f64,
    #[serde(default = "default_gain_setting")]
    pub gain_setting_dbi: i32,
    pub send_period_s: f64,
    #[serde(default)]
    pub confirmed: bool,
    #[serde(default)]
    pub payload: Payload,
    /// Restricts uplinks to these frequencies (Hz) instead of the plan's set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<u32>>,
    #[serde(default)]
    pub obstacles: Obstacles,
    /// Per-gateway overrides of `obstacles`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gateway_obstacles: BTreeMap<u32, Obstacles>,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_s: Option<f64>,
    #[serde(default = "default_ping_nb")]
    pub ping_nb: u16,
}

impl NodeConfig {
    pub fn new(dev_eui: DevEui, position: Position, dr: DataRate, send_period_s: f64) -> Self {
        Self {
            dev_eui,
            label: String::new(),
            position,
            class: DeviceClass::A,
            activation: Activation::Abp,
            dr,
            tx_power_dbm: default_tx_power(),
            gain_setting_dbi: default_gain_setting(),
            send_period_s,
            confirmed: false,
            payload: Payload::Meter,
            channels: None,
            obstacles: Obstacles::default(),
            gateway_obstacles: BTreeMap::new(),
            start_s: 0.0,
            stop_s: None,
            ping_nb: default_ping_nb(),
        }
    }

    pub fn name(&self) -> String {
        if self.label.is_empty() {
            self.dev_eui.to_string()
        } else {
            self.label.clone()
        }
    }

    pub fn obstacles_to(&self, gateway_id: u32) -> Obstacles {
        self.gateway_obstacles
            .get(&gateway_id)
            .copied()
            .unwrap_or(self.obstacles)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("scenario is invalid:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
pub struct ValidationError(pub Vec<Violation>);

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn duration(&self) -> crate::time::Micros {
        crate::time::Micros::from_secs_f64(self.duration_s)
    }

    /// Every problem with the scenario, each tagged with its JSON path.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut out = Vec::new();
        let mut bad = |path: String, message: String| out.push(Violation { path, message });
        let plan = ChannelPlan::eu868();

        if !positive(self.duration_s) {
            bad("duration_s".into(), format!("must be positive, got {}", self.duration_s));
        }
        for term in self.environment.invalid_terms() {
            bad(format!("environment.{term}"), "must be finite and non-negative".into());
        }
        if !(self.backhaul.base_ms.is_finite() && self.backhaul.base_ms >= 0.0) {
            bad("backhaul.base_ms".into(), "must be finite and non-negative".into());
        }
        if !(self.backhaul.mean_ms.is_finite() && self.backhaul.mean_ms >= 0.0) {
            bad("backhaul.mean_ms".into(), "must be finite and non-negative".into());
        }
        if !(self.ack_timeout_s.is_finite() && self.ack_timeout_s >= 0.0) {
            bad("ack_timeout_s".into(), "must be finite and non-negative".into());
        }
        if self.gateways.is_empty() {
            bad("gateways".into(), "at least one gateway is required".into());
        }
        let mut ids = BTreeSet::new();
        for (i, g) in self.gateways.iter().enumerate() {
            let p = format!("gateways[{i}]");
            if !ids.insert(g.id) {
                bad(format!("{p}.id"), format!("duplicate gateway id {}", g.id));
            }
            if !g.position.is_finite() {
                bad(format!("{p}.position"), "coordinates must be finite".into());
            }
            if g.demodulators == 0 {
                bad(format!("{p}.demodulators"), "must be at least 1".into());
            }
            for (field, v) in [
                ("tx_power_dbm", g.tx_power_dbm),
                ("antenna_gain_db", g.antenna_gain_db),
                ("rx_loss_db", g.rx_loss_db),
                ("noise_figure_db", g.noise_figure_db),
            ] {
                if !v.is_finite() {
                    bad(format!("{p}.{field}"), "must be finite".into());
                }
            }
        }
        if self.nodes.is_empty() {
            bad("nodes".into(), "at least one node is required".into());
        }
        let mut euis = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let p = format!("nodes[{i}]");
            if !euis.insert(n.dev_eui) {
                bad(format!("{p}.dev_eui"), format!("duplicate device {}", n.dev_eui));
            }
            if !n.position.is_finite() {
                bad(format!("{p}.position"), "coordinates must be finite".into());
            } else {
                for g in &self.gateways {
                    if g.position.is_finite() && !(n.position.distance(&g.position) > 0.0) {
                        bad(format!("{p}.position"), format!("coincides with gateway {}", g.id));
                    }
                }
            }
            if !positive(n.send_period_s) {
                bad(
                    format!("{p}.send_period_s"),
                    format!("must be positive, got {}", n.send_period_s),
                );
            }
            if !(n.start_s.is_finite() && n.start_s >= 0.0) {
                bad(format!("{p}.start_s"), "must be finite and non-negative".into());
            }
            if let Some(stop) = n.stop_s {
                if !(stop.is_finite() && stop > n.start_s) {
                    bad(format!("{p}.stop_s"), "must be finite and after start_s".into());
                }
            }
            if link::effective_antenna_gain(n.gain_setting_dbi).is_err() {
                bad(
                    format!("{p}.gain_setting_dbi"),
                    format!("{} outside -128..=127", n.gain_setting_dbi),
                );
            }
            if n.class == DeviceClass::B && !(n.ping_nb.is_power_of_two() && n.ping_nb <= 128) {
                bad(format!("{p}.ping_nb"), "must be a power of two up to 128".into());
            }
            let channels: Vec<u32> = match &n.channels {
                Some(list) => {
                    if list.is_empty() {
                        bad(format!("{p}.channels"), "must not be empty".into());
                    }
                    for (j, f) in list.iter().enumerate() {
                        if plan.get(*f).is_none() {
                            bad(format!("{p}.channels[{j}]"), format!("{f} Hz is not in the channel plan"));
                        }
                    }
                    list.clone()
                }
                None => plan.uplink_channels().iter().map(|c| c.center_freq_hz).collect(),
            };
            for f in channels {
                if let Some(ch) = plan.get(f) {
                    if let Err(v) = check_erp(n.tx_power_dbm, ch) {
                        bad(format!("{p}.tx_power_dbm"), v.to_string());
                        break;
                    }
                }
            }
            let max = n.dr.max_app_payload();
            match &n.payload {
                Payload::Meter => {}
                Payload::Raw(h) => match hex::decode(h) {
                    Ok(b) if b.len() > max => bad(
                        format!("{p}.payload.raw"),
                        format!("{} bytes exceed the {max}-byte limit of {}", b.len(), n.dr),
                    ),
                    Ok(_) => {}
                    Err(e) => bad(format!("{p}.payload.raw"), format!("invalid hex: {e}")),
                },
                Payload::Zeros(len) if *len > max => bad(
                    format!("{p}.payload.zeros"),
                    format!("{len} bytes exceed the {max}-byte limit of {}", n.dr),
                ),
                Payload::Zeros(_) => {}
            }
            for gid in n.gateway_obstacles.keys() {
                if !ids.contains(gid) {
                    bad(format!("{p}.gateway_obstacles.{gid}"), "unknown gateway".into());
                }
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(ValidationError(out))
        }
    }
}
