//! Run statistics and their reconstruction from a packet log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::server::{self, PacketRecord};

/// Five-number summary plus mean. Quartiles interpolate linearly between
/// order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            count: v.len(),
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub dev_eui: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
    pub sent: u64,
    pub received: u64,
    pub per_percent: f64,
    pub rssi: Option<Summary>,
    pub snr: Option<Summary>,
    pub ack_requested: u64,
    pub ack_missed: u64,
}

impl NodeStats {
    pub fn per(sent: u64, received: u64) -> f64 {
        if sent == 0 {
            0.0
        } else {
            100.0 * (sent - received) as f64 / sent as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub id: u32,
    /// Received packets per channel frequency.
    pub channel_usage: BTreeMap<u32, u64>,
    pub received: u64,
    pub collided: u64,
    pub below_threshold: u64,
    pub saturated: u64,
}

impl GatewayStats {
    pub fn heard(&self) -> u64 {
        self.received + self.collided + self.below_threshold + self.saturated
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub transmissions: u64,
    pub nodes: Vec<NodeStats>,
    pub gateways: Vec<GatewayStats>,
    pub datagrams: u64,
    pub downlinks: u64,
}

impl RunStats {
    pub fn node(&self, name: &str) -> Option<&NodeStats> {
        self.nodes
            .iter()
            .find(|n| n.label == name || n.dev_eui == name)
    }

    pub fn ack_missed_total(&self) -> u64 {
        self.nodes.iter().map(|n| n.ack_missed).sum()
    }
}

/// Per-node statistics recomputed from a packet log alone. `labels` maps
/// device EUIs to display labels.
pub fn node_stats_from_log(log: &[PacketRecord], labels: &BTreeMap<String, String>) -> Vec<NodeStats> {
    server::summarize_log(log)
        .into_iter()
        .map(|(dev_eui, s)| {
            let rssi: Vec<f64> = s.rssi.iter().map(|&r| f64::from(r)).collect();
            NodeStats {
                label: labels.get(&dev_eui).cloned().unwrap_or_default(),
                dev_eui,
                sent: s.sent,
                received: s.received,
                per_percent: NodeStats::per(s.sent, s.received),
                rssi: Summary::of(&rssi),
                snr: Summary::of(&s.snr),
                ack_requested: s.ack_requested,
                ack_missed: s.ack_missed,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert_eq!(s.mean, 3.0);
        let s = Summary::of(&[1.0, 2.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.25, 1.5, 1.75));
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn per_formula() {
        assert_eq!(NodeStats::per(10, 10), 0.0);
        assert_eq!(NodeStats::per(4, 1), 75.0);
        assert_eq!(NodeStats::per(0, 0), 0.0);
    }
}
