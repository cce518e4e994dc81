//! Discrete-event execution of a [`Scenario`].
//!
//! Events are processed in `(time, phase, sequence)` order. At equal times
//! transmissions end before downlinks and new transmissions start, so a
//! demodulator released at `t` is available to a packet starting at `t`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{NodeConfig, Payload, Scenario, ValidationError};
use super::stats::{GatewayStats, NodeStats, RunStats, Summary};
use super::Transmission;
use crate::airtime::{time_on_air, DataRate, FRAME_OVERHEAD};
use crate::codec::{self, MeterDatagram, MeterType};
use crate::link::{self, Snr};
use crate::mac::class::{self, DeviceClass, DeviceEvent, DeviceState, MissReason, Outcome};
use crate::mac::crypto::Key;
use crate::mac::session::{complete_join, JoinRequest};
use crate::mac::{Activation, MacError, Session};
use crate::regulation::{AirtimeEntry, ChannelPlan, DutyLedger};
use crate::rng::{self, tag, SimRng};
use crate::server::{
    self, AckOutcome, AckPlan, AckRequest, GatewayRecord, GatewayTx, IngestOutcome, NetworkServer,
    PacketRecord, PlannedDownlink, Status,
};
use crate::time::Micros;

const BW_HZ: u32 = 125_000;
const NODE_NOISE_FIGURE_DB: f64 = 6.0;
const JITTER: f64 = 0.05;
/// Longest possible frame (SF12, 255 bytes) with room to spare.
const MAX_AIR: Micros = Micros::from_secs(10);
/// How long a device waits for a join-accept before trying again.
const JOIN_WAIT: Micros = Micros::from_secs(8);
/// Epoch offset for datagram timestamps.
const EPOCH: u32 = 1_500_000_000;

/// What happened to one transmission at one gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fate {
    Received,
    Collided,
    BelowThreshold,
    Saturated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reception {
    pub tx_id: u64,
    pub gateway_id: u32,
    pub fate: Fate,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub log: Vec<PacketRecord>,
    pub stats: RunStats,
    pub receptions: Vec<Reception>,
    /// Every uplink put on air, joins included.
    pub uplinks: Vec<AirtimeEntry>,
    pub downlinks: Vec<AirtimeEntry>,
}

impl RunOutput {
    pub fn log_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        server::write_log(&self.log, &mut out).expect("writing to memory");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    TxEnd(usize),
    DownlinkStart(usize),
    TxStart(usize),
    Beacon(u64),
    Deadline { node: usize, attempt: u64 },
    Wake(usize),
}

impl Event {
    fn phase(&self) -> u8 {
        match self {
            Event::TxEnd(_) => 0,
            Event::DownlinkStart(_) => 1,
            Event::TxStart(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum TxKind {
    Data { confirmed: bool },
    Join,
}

#[derive(Debug, Clone, Copy)]
struct Obs {
    rssi: f64,
    snr: Snr,
    locked: bool,
    fate: Option<Fate>,
}

struct TxRt {
    tx: Transmission,
    node: usize,
    dr: DataRate,
    kind: TxKind,
    obs: Vec<Obs>,
}

enum DlPurpose {
    Ack { line: usize },
    JoinAccept,
}

struct DlRt {
    node: usize,
    plan: PlannedDownlink,
    purpose: DlPurpose,
}

struct NodeRt {
    session: Option<Session>,
    app_key: Key,
    ledger: DutyLedger,
    rng: SimRng,
    queue: VecDeque<(u8, Vec<u8>)>,
    next_due: Micros,
    datagram_seq: u32,
    device: DeviceState,
    attempt: u64,
    awaiting: bool,
    pending_join: Option<JoinRequest>,
    retries_left: u8,
    stop: Micros,
    channels: Vec<u32>,
    sent: u64,
    received: u64,
    rssi: Vec<f64>,
    snr: Vec<f64>,
    ack_requested: u64,
    ack_missed: u64,
}

struct GwRt {
    busy_demods: usize,
    stats: GatewayStats,
}

struct Engine<'a> {
    sc: &'a Scenario,
    plan: ChannelPlan,
    heap: BinaryHeap<Reverse<(Micros, u8, u64, Event)>>,
    seq: u64,
    now: Micros,
    end: Micros,
    nodes: Vec<NodeRt>,
    gws: Vec<GwRt>,
    gw_tx: Vec<GatewayTx>,
    server: NetworkServer,
    txs: Vec<TxRt>,
    recent: Vec<usize>,
    dls: Vec<DlRt>,
    receptions: Vec<Reception>,
    uplinks: Vec<AirtimeEntry>,
}

/// Validates and runs a scenario.
pub fn run(sc: &Scenario) -> Result<RunOutput, ValidationError> {
    sc.validate()?;
    Ok(Engine::new(sc).run())
}

fn jittered(rng: &mut SimRng, period_s: f64) -> Micros {
    let f = 1.0 + rng.random_range(-JITTER..=JITTER);
    Micros::from_secs_f64(period_s * f)
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario) -> Self {
        let plan = ChannelPlan::eu868();
        let end = sc.duration();
        let mut server = NetworkServer::new(plan.clone());
        let nodes = sc
            .nodes
            .iter()
            .map(|n| {
                let eui = n.dev_eui.as_u64();
                let app_key: Key = rng::stream(sc.seed, &[tag::KEYS, eui]).random();
                let session = match n.activation {
                    Activation::Abp => {
                        let s = Session::abp_from_eui(n.dev_eui);
                        server.register_session(s.clone());
                        Some(s)
                    }
                    Activation::Otaa => {
                        server.register_app_key(n.dev_eui, app_key);
                        None
                    }
                };
                let channels = match &n.channels {
                    Some(list) => list.clone(),
                    None if n.activation == Activation::Otaa => Vec::new(),
                    None => plan.uplink_channels().iter().map(|c| c.center_freq_hz).collect(),
                };
                let dev_addr = session.as_ref().map_or(0, |s| s.dev_addr);
                let mut device = DeviceState::new(n.class, dev_addr);
                device.ping_nb = n.ping_nb;
                let stop = n
                    .stop_s
                    .map_or(end, |s| Micros::from_secs_f64(s).min(end));
                NodeRt {
                    session,
                    app_key,
                    ledger: DutyLedger::new(sc.duty_mode),
                    rng: rng::stream(sc.seed, &[tag::NODE, eui]),
                    queue: VecDeque::new(),
                    next_due: Micros::ZERO,
                    datagram_seq: 0,
                    device,
                    attempt: 0,
                    awaiting: false,
                    pending_join: None,
                    retries_left: sc.retry_limit,
                    stop,
                    channels,
                    sent: 0,
                    received: 0,
                    rssi: Vec::new(),
                    snr: Vec::new(),
                    ack_requested: 0,
                    ack_missed: 0,
                }
            })
            .collect();
        let gws = sc
            .gateways
            .iter()
            .map(|g| GwRt {
                busy_demods: 0,
                stats: GatewayStats {
                    id: g.id,
                    ..GatewayStats::default()
                },
            })
            .collect();
        let gw_tx = sc
            .gateways
            .iter()
            .map(|g| GatewayTx::new(g.id, sc.duty_mode))
            .collect();
        Self {
            sc,
            plan,
            heap: BinaryHeap::new(),
            seq: 0,
            now: Micros::ZERO,
            end,
            nodes,
            gws,
            gw_tx,
            server,
            txs: Vec::new(),
            recent: Vec::new(),
            dls: Vec::new(),
            receptions: Vec::new(),
            uplinks: Vec::new(),
        }
    }

    fn schedule(&mut self, at: Micros, ev: Event) {
        self.seq += 1;
        self.heap.push(Reverse((at, ev.phase(), self.seq, ev)));
    }

    fn run(mut self) -> RunOutput {
        for i in 0..self.nodes.len() {
            let cfg = &self.sc.nodes[i];
            self.schedule(Micros::from_secs_f64(cfg.start_s), Event::Wake(i));
        }
        if self.sc.nodes.iter().any(|n| n.class == DeviceClass::B) {
            self.schedule(Micros::ZERO, Event::Beacon(0));
        }
        while let Some(Reverse((t, _, _, ev))) = self.heap.pop() {
            self.now = t;
            match ev {
                Event::Wake(n) => self.wake(n),
                Event::TxStart(id) => self.tx_start(id),
                Event::TxEnd(id) => self.tx_end(id),
                Event::DownlinkStart(d) => self.downlink(d),
                Event::Deadline { node, attempt } => self.deadline(node, attempt),
                Event::Beacon(k) => self.beacon(k),
            }
        }
        self.finish()
    }

    fn fill_queue(&mut self, n: usize) {
        let cfg = &self.sc.nodes[n];
        let now = self.now;
        let node = &mut self.nodes[n];
        match &cfg.payload {
            Payload::Meter => {
                let mut readings = [0i32; codec::READINGS];
                for r in readings.iter_mut() {
                    *r = node.rng.random_range(0..1_000_000);
                }
                let d = MeterDatagram {
                    meter_id: cfg.dev_eui.as_u64(),
                    datagram_seq: node.datagram_seq,
                    timestamp: EPOCH.wrapping_add(now.as_micros().div_euclid(1_000_000) as u32),
                    meter_type: MeterType::Electricity,
                    status_flags: 0,
                    readings,
                };
                node.datagram_seq = node.datagram_seq.wrapping_add(1);
                let bytes = d.encode();
                if cfg.dr.max_app_payload() >= codec::DATAGRAM_LEN {
                    node.queue.push_back((server::PORT_DATAGRAM, bytes.to_vec()));
                } else {
                    for f in codec::fragment(&bytes).expect("96-byte datagram") {
                        node.queue
                            .push_back((server::PORT_FRAGMENT, f.to_bytes().to_vec()));
                    }
                }
            }
            Payload::Raw(h) => node
                .queue
                .push_back((3, hex::decode(h).expect("validated hex"))),
            Payload::Zeros(len) => node.queue.push_back((3, vec![0; *len])),
        }
        node.next_due = now + jittered(&mut node.rng, cfg.send_period_s);
        node.retries_left = self.sc.retry_limit;
    }

    fn wake(&mut self, n: usize) {
        let now = self.now;
        if now >= self.nodes[n].stop || self.nodes[n].awaiting {
            return;
        }
        self.nodes[n].ledger.prune(now);
        let cfg = &self.sc.nodes[n];
        let joining = self.nodes[n].session.is_none();
        let (phy_len, channels) = if joining {
            let join: Vec<u32> = match &cfg.channels {
                Some(list) => list.clone(),
                None => self.plan.join_channels().iter().map(|c| c.center_freq_hz).collect(),
            };
            (FRAME_OVERHEAD + 10, join)
        } else {
            if self.nodes[n].queue.is_empty() {
                self.fill_queue(n);
            }
            let len = self.nodes[n].queue.front().map_or(0, |(_, p)| p.len());
            (FRAME_OVERHEAD + len, self.nodes[n].channels.clone())
        };
        let toa = time_on_air(&cfg.dr.params(), phy_len).expect("validated data rate");

        // Earliest permitted start per channel; ties broken uniformly.
        let mut best: Option<Micros> = None;
        let mut ties: Vec<u32> = Vec::new();
        for f in &channels {
            let ch = self.plan.get(*f).expect("validated channel");
            let Ok(t) = self.nodes[n].ledger.earliest_start(ch, now, toa) else {
                continue;
            };
            match best {
                Some(b) if t > b => {}
                Some(b) if t == b => ties.push(*f),
                _ => {
                    best = Some(t);
                    ties = vec![*f];
                }
            }
        }
        let Some(start) = best else { return };
        if start >= self.nodes[n].stop {
            return;
        }
        let node = &mut self.nodes[n];
        let freq = ties[node.rng.random_range(0..ties.len())];
        let ch = self.plan.get(freq).expect("validated channel");
        node.ledger.record(ch, start, toa);

        let (frame, kind) = if joining {
            let req = JoinRequest {
                dev_eui: cfg.dev_eui,
                dev_nonce: node.rng.random(),
            };
            node.pending_join = Some(req);
            (req.to_frame(&node.app_key), TxKind::Join)
        } else {
            let (port, payload) = node.queue.front().cloned().expect("queue filled");
            let session = node.session.as_mut().expect("joined");
            match session.build_uplink(port, &payload, cfg.confirmed, cfg.dr) {
                Ok(f) => (f, TxKind::Data { confirmed: cfg.confirmed }),
                Err(MacError::CounterExhausted) if cfg.activation == Activation::Otaa => {
                    node.session = None;
                    self.schedule(now, Event::Wake(n));
                    return;
                }
                Err(_) => {
                    node.stop = now;
                    return;
                }
            }
        };
        let id = self.txs.len();
        self.txs.push(TxRt {
            tx: Transmission {
                id: id as u64,
                source: n as u32,
                channel_hz: freq,
                sf: cfg.dr.sf(),
                start,
                toa,
                tx_power_dbm: cfg.tx_power_dbm,
                frame: frame.to_bytes(),
            },
            node: n,
            dr: cfg.dr,
            kind,
            obs: Vec::new(),
        });
        self.nodes[n].awaiting = true;
        self.uplinks.push(AirtimeEntry {
            transmitter: cfg.dev_eui.to_string(),
            freq_hz: freq,
            start,
            toa,
        });
        self.schedule(start, Event::TxStart(id));
    }

    /// Loss between a node and a gateway, frozen shadowing included.
    fn link_loss(&self, cfg: &NodeConfig, g: usize) -> f64 {
        let gw = &self.sc.gateways[g];
        let env = &self.sc.environment;
        link::path_loss(env, &cfg.position, &gw.position, &cfg.obstacles_to(gw.id))
            .expect("validated distance")
            + link::shadowing_db(env, self.sc.seed, gw.id, &cfg.position)
    }

    fn fading(&self, parts: &[u64]) -> f64 {
        let mut r = rng::stream(self.sc.seed, parts);
        link::gaussian(&mut r, self.sc.environment.fading_sigma_db)
    }

    fn tx_start(&mut self, id: usize) {
        let (n, sf, toa, start, power) = {
            let t = &self.txs[id];
            (t.node, t.tx.sf, t.tx.toa, t.tx.start, t.tx.tx_power_dbm)
        };
        self.nodes[n]
            .device
            .step(DeviceEvent::UplinkStart { at: start, toa });
        let cfg = &self.sc.nodes[n];
        let node_gain =
            link::effective_antenna_gain(cfg.gain_setting_dbi).expect("validated gain setting");
        let mut obs = Vec::with_capacity(self.gws.len());
        for g in 0..self.gws.len() {
            let gw = &self.sc.gateways[g];
            let loss = self.link_loss(cfg, g)
                + self.fading(&[tag::FADING, id as u64, u64::from(gw.id)])
                + gw.rx_loss_db;
            let rssi = link::rssi(power, node_gain, gw.antenna_gain_db, loss);
            let snr = link::snr(rssi, BW_HZ, gw.noise_figure_db);
            let mut o = Obs {
                rssi,
                snr,
                locked: false,
                fate: None,
            };
            if rssi < link::sensitivity_dbm(sf) {
                o.fate = Some(Fate::BelowThreshold);
            } else if self.gws[g].busy_demods < gw.demodulators {
                self.gws[g].busy_demods += 1;
                o.locked = true;
            } else {
                o.fate = Some(Fate::Saturated);
            }
            obs.push(o);
        }
        self.txs[id].obs = obs;
        if matches!(self.txs[id].kind, TxKind::Data { .. }) {
            self.nodes[n].sent += 1;
        }
        let now = self.now;
        let txs = &self.txs;
        self.recent.retain(|&r| txs[r].tx.end() + MAX_AIR > now);
        self.recent.push(id);
        self.schedule(start + toa, Event::TxEnd(id));
    }

    fn tx_end(&mut self, id: usize) {
        let now = self.now;
        let n = self.txs[id].node;
        let (sf, freq, dr) = (self.txs[id].tx.sf, self.txs[id].tx.channel_hz, self.txs[id].dr);
        for g in 0..self.gws.len() {
            let o = self.txs[id].obs[g];
            if !o.locked {
                continue;
            }
            self.gws[g].busy_demods -= 1;
            let this = &self.txs[id].tx;
            let collided = self.recent.iter().any(|&other| {
                let t = &self.txs[other];
                other != id
                    && link::collide(this, &t.tx)
                    && t.obs.get(g).is_some_and(|ob| ob.rssi >= link::sensitivity_dbm(t.tx.sf))
            });
            let fate = if collided {
                Fate::Collided
            } else {
                let gw_id = u64::from(self.sc.gateways[g].id);
                let mut r = rng::stream(self.sc.seed, &[tag::MARGIN, id as u64, gw_id]);
                if link::decide(o.rssi, o.snr.true_db, sf, link::draw_margin(&mut r)) {
                    Fate::Received
                } else {
                    Fate::BelowThreshold
                }
            };
            self.txs[id].obs[g].fate = Some(fate);
        }
        for g in 0..self.gws.len() {
            let fate = self.txs[id].obs[g].fate.expect("every gateway decided");
            let st = &mut self.gws[g].stats;
            match fate {
                Fate::Received => {
                    st.received += 1;
                    *st.channel_usage.entry(freq).or_insert(0) += 1;
                }
                Fate::Collided => st.collided += 1,
                Fate::BelowThreshold => st.below_threshold += 1,
                Fate::Saturated => st.saturated += 1,
            }
            self.receptions.push(Reception {
                tx_id: id as u64,
                gateway_id: self.sc.gateways[g].id,
                fate,
            });
        }
        let done = if matches!(self.txs[id].kind, TxKind::Join) {
            DeviceEvent::JoinRequestDone {
                end: now,
                freq_hz: freq,
                dr,
            }
        } else {
            DeviceEvent::UplinkDone {
                end: now,
                freq_hz: freq,
                dr,
            }
        };
        self.nodes[n].device.step(done);

        let record = |g: usize, o: &Obs, crc_ok: bool, frame: &[u8]| GatewayRecord {
            gateway_id: self.sc.gateways[g].id,
            receive_time: now,
            frequency_hz: freq,
            sf,
            rssi_dbm: link::reported_rssi(o.rssi),
            snr_db: (o.snr.reported_db * 4.0).round() / 4.0,
            crc_ok,
            frame: frame.to_vec(),
        };
        let frame = self.txs[id].tx.frame.clone();
        let obs = self.txs[id].obs.clone();
        self.server.prune(now);
        let mut primary = None;
        for (g, o) in obs.iter().enumerate() {
            if o.fate == Some(Fate::Received) {
                let out = self.server.ingest(&record(g, o, true, &frame));
                if let IngestOutcome::Accepted { line } = out {
                    primary.get_or_insert(line);
                }
            }
        }
        let accepted = primary.is_some();
        let line = match primary {
            Some(l) => l,
            None => {
                let fates: Vec<_> = obs.iter().filter_map(|o| o.fate).collect();
                let reason = if fates.contains(&Fate::Collided) {
                    Status::LostCollided
                } else if fates.contains(&Fate::Saturated) {
                    Status::LostSaturated
                } else {
                    Status::LostBelowThreshold
                };
                let g = (0..obs.len())
                    .max_by(|&a, &b| obs[a].rssi.total_cmp(&obs[b].rssi).then(b.cmp(&a)))
                    .expect("at least one gateway");
                self.server.log_lost(&record(g, &obs[g], false, &frame), reason)
            }
        };
        for (g, o) in obs.iter().enumerate() {
            if o.fate == Some(Fate::Collided) {
                self.server.ingest(&record(g, o, false, &frame));
            }
        }
        if accepted {
            let row = &self.server.log()[line];
            let node = &mut self.nodes[n];
            node.received += u64::from(matches!(self.txs[id].kind, TxKind::Data { .. }));
            if matches!(self.txs[id].kind, TxKind::Data { .. }) {
                node.rssi.push(f64::from(row.rssi_dbm));
                node.snr.push(row.snr_db);
            }
        }

        match self.txs[id].kind {
            TxKind::Data { confirmed: false } => self.finish_exchange(n),
            TxKind::Data { confirmed: true } => {
                self.nodes[n].ack_requested += 1;
                let deadline = now + class::RX2_DELAY + Micros::from_secs_f64(self.sc.ack_timeout_s);
                let attempt = self.nodes[n].attempt;
                if accepted {
                    self.plan_ack(id, line, deadline);
                } else {
                    self.record_ack(n, line, AckOutcome::UplinkLost);
                }
                self.schedule(deadline, Event::Deadline { node: n, attempt });
            }
            TxKind::Join => {
                let deadline = now + JOIN_WAIT;
                let attempt = self.nodes[n].attempt;
                if accepted {
                    self.plan_join_accept(id, line, deadline);
                }
                self.schedule(deadline, Event::Deadline { node: n, attempt });
            }
        }
    }

    fn backhaul(&self, id: usize) -> Micros {
        let b = self.sc.backhaul;
        let mut ms = b.base_ms;
        if b.mean_ms > 0.0 {
            let mut r = rng::stream(self.sc.seed, &[tag::BACKHAUL, id as u64]);
            let u: f64 = r.random_range(f64::EPSILON..1.0);
            ms += -b.mean_ms * u.ln();
        }
        Micros::from_secs_f64(ms / 1000.0)
    }

    fn ack_request(&self, id: usize, deadline: Micros) -> AckRequest {
        let t = &self.txs[id];
        let n = t.node;
        AckRequest {
            dev_addr: self.nodes[n].session.as_ref().map_or(0, |s| s.dev_addr),
            class: self.sc.nodes[n].class,
            uplink_end: t.tx.end(),
            uplink_freq_hz: t.tx.channel_hz,
            uplink_dr: t.dr,
            ready_at: t.tx.end() + self.backhaul(id),
            deadline,
            ping_nb: self.sc.nodes[n].ping_nb,
        }
    }

    fn gateway_index(&self, line: usize) -> usize {
        let copies = self.server.copies_of(line);
        let gid = server::choose_downlink_gateway(&copies).expect("accepted frame has a copy");
        self.sc
            .gateways
            .iter()
            .position(|g| g.id == gid)
            .expect("known gateway")
    }

    fn plan_ack(&mut self, id: usize, line: usize, deadline: Micros) {
        let n = self.txs[id].node;
        let req = self.ack_request(id, deadline);
        let g = self.gateway_index(line);
        self.gw_tx[g].prune(self.now);
        match self.server.schedule_ack(&mut self.gw_tx[g], &req) {
            AckPlan::Planned(plan) => {
                let at = plan.start;
                self.dls.push(DlRt {
                    node: n,
                    plan,
                    purpose: DlPurpose::Ack { line },
                });
                self.schedule(at, Event::DownlinkStart(self.dls.len() - 1));
            }
            AckPlan::Dropped(reason) => self.record_ack(n, line, reason),
        }
    }

    fn plan_join_accept(&mut self, id: usize, line: usize, deadline: Micros) {
        let n = self.txs[id].node;
        let req = self.ack_request(id, deadline);
        let g = self.gateway_index(line);
        self.gw_tx[g].prune(self.now);
        let eui = self.sc.nodes[n].dev_eui;
        if let AckPlan::Planned(plan) = self.server.schedule_join_accept(&mut self.gw_tx[g], &req, eui) {
            let at = plan.start;
            self.dls.push(DlRt {
                node: n,
                plan,
                purpose: DlPurpose::JoinAccept,
            });
            self.schedule(at, Event::DownlinkStart(self.dls.len() - 1));
        }
    }

    fn record_ack(&mut self, n: usize, line: usize, outcome: AckOutcome) {
        self.server.set_ack(line, outcome);
        if outcome.is_miss() {
            self.nodes[n].ack_missed += 1;
        }
    }

    /// Whether a downlink from gateway `g` is demodulated at node `n`.
    fn downlink_heard(&self, n: usize, g: usize, freq_hz: u32, dr: DataRate, parts: &[u64]) -> bool {
        let cfg = &self.sc.nodes[n];
        let gw = &self.sc.gateways[g];
        let erp = self.plan.get(freq_hz).map_or(gw.tx_power_dbm, |c| c.max_erp_dbm);
        let node_gain =
            link::effective_antenna_gain(cfg.gain_setting_dbi).expect("validated gain setting");
        let mut fade_parts = vec![tag::DOWNLINK, 0];
        fade_parts.extend_from_slice(parts);
        let loss = self.link_loss(cfg, g) + self.fading(&fade_parts);
        let rssi = link::rssi(gw.tx_power_dbm.min(erp), gw.antenna_gain_db, node_gain, loss);
        let snr = link::snr(rssi, BW_HZ, NODE_NOISE_FIGURE_DB);
        let mut margin_parts = vec![tag::DOWNLINK, 1];
        margin_parts.extend_from_slice(parts);
        let mut r = rng::stream(self.sc.seed, &margin_parts);
        link::decide(rssi, snr.true_db, dr.sf(), link::draw_margin(&mut r))
    }

    fn downlink(&mut self, d: usize) {
        let n = self.dls[d].node;
        let (start, freq, dr, gid) = {
            let p = &self.dls[d].plan;
            (p.start, p.freq_hz, p.dr, p.gateway_id)
        };
        let g = self
            .sc
            .gateways
            .iter()
            .position(|gw| gw.id == gid)
            .expect("known gateway");
        let outcome = match self.nodes[n].device.step(DeviceEvent::Downlink {
            start,
            freq_hz: freq,
            dr,
        }) {
            Outcome::Delivered => {
                if self.downlink_heard(n, g, freq, dr, &[d as u64]) {
                    AckOutcome::Delivered
                } else {
                    AckOutcome::DownlinkLost
                }
            }
            Outcome::Missed(MissReason::Transmitting) => AckOutcome::DeviceBusy,
            _ => AckOutcome::WindowMissed,
        };
        match self.dls[d].purpose {
            DlPurpose::Ack { line } => {
                self.record_ack(n, line, outcome);
                if outcome == AckOutcome::Delivered {
                    self.finish_exchange(n);
                }
            }
            DlPurpose::JoinAccept => {
                if outcome != AckOutcome::Delivered {
                    return;
                }
                let node = &mut self.nodes[n];
                let Some(req) = node.pending_join else { return };
                if let Ok(session) = complete_join(&req, &self.dls[d].plan.frame, &node.app_key) {
                    node.device.dev_addr = session.dev_addr;
                    node.session = Some(session);
                    node.pending_join = None;
                    if node.channels.is_empty() {
                        node.channels = self
                            .plan
                            .uplink_channels()
                            .iter()
                            .map(|c| c.center_freq_hz)
                            .collect();
                    }
                    node.awaiting = false;
                    node.attempt += 1;
                    self.schedule(self.now, Event::Wake(n));
                }
            }
        }
    }

    fn finish_exchange(&mut self, n: usize) {
        let now = self.now;
        let node = &mut self.nodes[n];
        node.queue.pop_front();
        node.awaiting = false;
        node.attempt += 1;
        node.retries_left = self.sc.retry_limit;
        let at = if node.queue.is_empty() {
            node.next_due.max(now)
        } else {
            now
        };
        self.schedule(at, Event::Wake(n));
    }

    fn deadline(&mut self, n: usize, attempt: u64) {
        let node = &mut self.nodes[n];
        if node.attempt != attempt || !node.awaiting {
            return;
        }
        if node.session.is_none() {
            node.awaiting = false;
            node.attempt += 1;
            self.schedule(self.now, Event::Wake(n));
        } else if node.retries_left > 0 {
            node.retries_left -= 1;
            node.awaiting = false;
            node.attempt += 1;
            self.schedule(self.now, Event::Wake(n));
        } else {
            self.finish_exchange(n);
        }
    }

    fn beacon(&mut self, k: u64) {
        let at = self.now;
        for n in 0..self.nodes.len() {
            if self.sc.nodes[n].class != DeviceClass::B {
                continue;
            }
            let heard = (0..self.sc.gateways.len()).any(|g| {
                self.downlink_heard(
                    n,
                    g,
                    crate::regulation::RX2_FREQ_HZ,
                    DataRate::DR3,
                    &[tag::BEACON, k, n as u64, g as u64],
                )
            });
            self.nodes[n].device.step(DeviceEvent::Beacon { at, heard });
        }
        let next = at + class::BEACON_PERIOD;
        if next < self.end {
            self.schedule(next, Event::Beacon(k + 1));
        }
    }

    fn finish(self) -> RunOutput {
        let mut nodes: Vec<NodeStats> = self
            .nodes
            .iter()
            .zip(&self.sc.nodes)
            .map(|(rt, cfg)| NodeStats {
                dev_eui: cfg.dev_eui.to_string(),
                label: cfg.label.clone(),
                sent: rt.sent,
                received: rt.received,
                per_percent: NodeStats::per(rt.sent, rt.received),
                rssi: Summary::of(&rt.rssi),
                snr: Summary::of(&rt.snr),
                ack_requested: rt.ack_requested,
                ack_missed: rt.ack_missed,
            })
            .collect();
        nodes.sort_by(|a, b| a.dev_eui.cmp(&b.dev_eui));
        let stats = RunStats {
            transmissions: self.txs.len() as u64,
            nodes,
            gateways: self.gws.into_iter().map(|g| g.stats).collect(),
            datagrams: self.server.datagrams().len() as u64,
            downlinks: self.dls.len() as u64,
        };
        let downlinks = self.server.downlinks().to_vec();
        RunOutput {
            log: self.server.into_log(),
            stats,
            receptions: self.receptions,
            uplinks: self.uplinks,
            downlinks,
        }
    }
}

/// Device labels keyed by EUI, for reports built from a log.
pub fn labels(sc: &Scenario) -> BTreeMap<String, String> {
    sc.nodes
        .iter()
        .filter(|n| !n.label.is_empty())
        .map(|n| (n.dev_eui.to_string(), n.label.clone()))
        .collect()
}

