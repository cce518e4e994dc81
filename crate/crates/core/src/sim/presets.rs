//! Checked-in scenarios: the indoor building sweep, the outdoor coverage
//! sweep and the confirmed-uplink contention run.

use std::f64::consts::TAU;

use super::scenario::{Backhaul, GatewayConfig, NodeConfig, Scenario};
use crate::airtime::DataRate;
use crate::link::{Environment, Obstacles, Position};
use crate::mac::{Activation, DevEui, DeviceClass};
use crate::regulation::DutyMode;

pub const PRESETS: [&str; 5] = [
    "indoor-sciencepark3",
    "outdoor-hagenberg",
    "contention-class-a",
    "contention-class-b",
    "contention-class-c",
];

pub fn preset(name: &str) -> Option<Scenario> {
    Some(match name {
        "indoor-sciencepark3" => indoor_sciencepark3(),
        "outdoor-hagenberg" => outdoor_hagenberg(),
        "contention-class-a" => ack_contention(DeviceClass::A),
        "contention-class-b" => ack_contention(DeviceClass::B),
        "contention-class-c" => ack_contention(DeviceClass::C),
        _ => return None,
    })
}

pub const FLOOR_HEIGHT_M: f64 = 3.05;
const SWEEP_S: f64 = 3600.0;
/// Shorter than any duty-cycle wait, so every sweep node transmits as often
/// as its budget allows.
const SATURATING_PERIOD_S: f64 = 1.0;

/// Indoor calibration. Floors and basement are tuned so that the
/// same-floor positions land near -83 dBm and the basement ones below the
/// SF12 sensitivity.
pub fn indoor_environment() -> Environment {
    Environment {
        path_loss_exponent: 2.9,
        reference_loss_db: 40.0,
        floor_penetration_db: 12.0,
        wall_penetration_db: 5.0,
        basement_extra_db: 25.0,
        shadowing_sigma_db: 2.0,
        fading_sigma_db: 1.5,
    }
}

pub fn outdoor_environment() -> Environment {
    Environment {
        path_loss_exponent: 2.1,
        reference_loss_db: 75.8,
        floor_penetration_db: 0.0,
        wall_penetration_db: 3.5,
        basement_extra_db: 0.0,
        shadowing_sigma_db: 0.0,
        fading_sigma_db: 1.0,
    }
}

/// A measurement site: distance from the gateway, floor offset and obstacles.
#[derive(Debug, Clone, Copy)]
pub struct Site {
    pub name: &'static str,
    pub distance_m: f64,
    pub floor_offset: i32,
    pub obstacles: Obstacles,
}

const fn site(name: &'static str, distance_m: f64, floor_offset: i32, floors: u32, walls: u32, basement: bool) -> Site {
    Site {
        name,
        distance_m,
        floor_offset,
        obstacles: Obstacles {
            floors,
            walls,
            basement,
        },
    }
}

pub const INDOOR_SITES: [Site; 9] = [
    site("pos1", 51.0, 4, 4, 0, false),
    site("pos2", 45.0, 2, 2, 0, false),
    site("pos3", 40.0, 0, 0, 2, false),
    site("pos4", 42.0, 0, 0, 2, false),
    site("pos5", 48.0, -2, 2, 0, false),
    site("pos6", 20.0, -2, 0, 0, false),
    site("pos7", 26.0, -2, 2, 1, true),
    site("pos8", 60.0, -3, 3, 0, true),
    site("pos9", 55.0, -3, 3, 0, true),
];

pub const OUTDOOR_SITES: [Site; 3] = [
    site("site1", 151.14, 0, 0, 0, false),
    site("site2", 635.8, 0, 0, 2, false),
    site("site3", 845.0, 0, 0, 0, false),
];

/// Point at exactly `distance` from `origin`, `dz` above it, on a bearing
/// spread by `k`.
fn place(origin: Position, distance: f64, dz: f64, k: usize) -> Position {
    let horizontal = (distance * distance - dz * dz).max(0.0).sqrt();
    let bearing = TAU * k as f64 / 9.0;
    Position::new(
        origin.x + horizontal * bearing.cos(),
        origin.y + horizontal * bearing.sin(),
        origin.z + dz,
    )
}

/// One node per (site, data rate), each active for one hour; sites run one
/// after another with data rates from DR5 down to DR0.
fn sweep(
    sites: &[Site],
    gateway: Position,
    eui_base: u64,
    activation: Activation,
) -> Vec<NodeConfig> {
    let mut nodes = Vec::new();
    for (i, s) in sites.iter().enumerate() {
        let pos = place(gateway, s.distance_m, f64::from(s.floor_offset) * FLOOR_HEIGHT_M, i);
        for (j, dr) in DataRate::all().rev().enumerate() {
            let slot = (i * 6 + j) as f64;
            let eui = DevEui::from_u64(eui_base + (i as u64) * 16 + u64::from(dr.index()));
            let mut n = NodeConfig::new(eui, pos, dr, SATURATING_PERIOD_S);
            n.label = format!("{}-dr{}", s.name, dr.index());
            n.obstacles = s.obstacles;
            n.activation = activation;
            n.start_s = slot * SWEEP_S;
            n.stop_s = Some((slot + 1.0) * SWEEP_S);
            nodes.push(n);
        }
    }
    nodes
}

/// Nine positions around a gateway on the second floor, swept DR5..DR0.
pub fn indoor_sciencepark3() -> Scenario {
    let gw = Position::new(0.0, 0.0, 2.0 * FLOOR_HEIGHT_M);
    let nodes = sweep(&INDOOR_SITES, gw, 0x70b3_d500_0000_1000, Activation::Abp);
    Scenario {
        name: "indoor-sciencepark3".into(),
        seed: 42,
        duration_s: nodes.len() as f64 * SWEEP_S,
        environment: indoor_environment(),
        duty_mode: DutyMode::default(),
        backhaul: Backhaul::default(),
        retry_limit: 0,
        ack_timeout_s: 2.0,
        gateways: vec![GatewayConfig::at(1, gw)],
        nodes,
    }
}

/// Three sites around a rooftop gateway, swept DR5..DR0, plus one OTAA
/// device near the gateway that joins and then reports for the whole run.
pub fn outdoor_hagenberg() -> Scenario {
    let gw = Position::new(0.0, 0.0, 20.0);
    let mut nodes = sweep(&OUTDOOR_SITES, gw, 0x70b3_d500_0000_2000, Activation::Abp);
    let duration_s = nodes.len() as f64 * SWEEP_S;
    let mut otaa = NodeConfig::new(
        DevEui::from_u64(0x70b3_d500_0000_2fff),
        place(gw, OUTDOOR_SITES[0].distance_m, 0.0, 4),
        DataRate::DR5,
        SATURATING_PERIOD_S,
    );
    otaa.label = "site1-otaa".into();
    otaa.activation = Activation::Otaa;
    nodes.push(otaa);
    Scenario {
        name: "outdoor-hagenberg".into(),
        seed: 42,
        duration_s,
        environment: outdoor_environment(),
        duty_mode: DutyMode::default(),
        backhaul: Backhaul::default(),
        retry_limit: 0,
        ack_timeout_s: 2.0,
        gateways: vec![GatewayConfig::at(1, gw)],
        nodes,
    }
}

pub const CONTENTION_NODES: usize = 5;
pub const CONTENTION_PERIOD_S: f64 = 300.0;
pub const CONTENTION_DURATION_S: f64 = 6.0 * 3600.0;

/// Confirmed-uplink devices of one class sharing a gateway behind a slow
/// backhaul.
pub fn ack_contention(class: DeviceClass) -> Scenario {
    let gw = Position::new(0.0, 0.0, 10.0);
    let nodes = (0..CONTENTION_NODES)
        .map(|i| {
            let pos = place(gw, 30.0 + 5.0 * i as f64, 0.0, i);
            let mut n = NodeConfig::new(
                DevEui::from_u64(0x70b3_d500_0000_3000 + i as u64),
                pos,
                DataRate::DR5,
                CONTENTION_PERIOD_S,
            );
            n.label = format!("{class}-{i:02}").to_lowercase();
            n.class = class;
            n.confirmed = true;
            n.start_s = CONTENTION_PERIOD_S * i as f64 / CONTENTION_NODES as f64;
            n
        })
        .collect();
    Scenario {
        name: format!("contention-class-{class}").to_lowercase(),
        seed: 7,
        duration_s: CONTENTION_DURATION_S,
        environment: Environment {
            shadowing_sigma_db: 0.0,
            ..Environment::indoor()
        },
        duty_mode: DutyMode::default(),
        backhaul: Backhaul {
            base_ms: 500.0,
            mean_ms: 1200.0,
        },
        retry_limit: 0,
        ack_timeout_s: 2.0,
        gateways: vec![GatewayConfig::at(1, gw)],
        nodes,
    }
}
