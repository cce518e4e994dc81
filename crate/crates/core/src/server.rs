//! Network server: deduplication, counter and MIC checks, join handling,
//! fragment reassembly, ACK scheduling through the best gateway and the
//! packet log.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::airtime::{time_on_air, DataRate};
use crate::codec::{Fragment, MeterDatagram, Reassembler, Reassembly};
use crate::mac::class::{self, DeviceClass};
use crate::mac::crypto::Key;
use crate::mac::session::{accept_join, JoinAccept, JoinRequest, NET_ID};
use crate::mac::{verify_mic, DevEui, Frame, MType, Session};
use crate::regulation::{AirtimeEntry, ChannelPlan, DutyLedger, DutyMode};
use crate::time::Micros;

pub const DEDUP_WINDOW: Micros = Micros::from_secs(2);
/// Port carrying a whole 96-byte datagram.
pub const PORT_DATAGRAM: u8 = 1;
/// Port carrying one 51-byte fragment.
pub const PORT_FRAGMENT: u8 = 2;
pub use crate::mac::class::{JOIN_ACCEPT_DELAY1, JOIN_ACCEPT_DELAY2};

/// One gateway's copy of an uplink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayRecord {
    pub gateway_id: u32,
    pub receive_time: Micros,
    pub frequency_hz: u32,
    pub sf: u8,
    pub rssi_dbm: i32,
    pub snr_db: f64,
    pub crc_ok: bool,
    pub frame: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Accepted,
    Duplicate,
    CrcError,
    RejectedMic,
    RejectedReplay,
    RejectedUnknownDevice,
    RejectedMalformed,
    LostBelowThreshold,
    LostCollided,
    LostSaturated,
}

impl Status {
    pub fn is_lost(self) -> bool {
        matches!(
            self,
            Status::LostBelowThreshold | Status::LostCollided | Status::LostSaturated
        )
    }

    pub fn is_rejected(self) -> bool {
        matches!(
            self,
            Status::CrcError
                | Status::RejectedMic
                | Status::RejectedReplay
                | Status::RejectedUnknownDevice
                | Status::RejectedMalformed
        )
    }
}

/// What became of the acknowledgment a confirmed uplink asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AckOutcome {
    Delivered,
    UplinkLost,
    DutyExhausted,
    WindowMissed,
    DownlinkLost,
    DeviceBusy,
}

impl AckOutcome {
    pub fn is_miss(self) -> bool {
        self != AckOutcome::Delivered
    }
}

/// One line of the packet log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Microseconds since scenario start.
    pub timestamp: Micros,
    pub dev_eui: Option<DevEui>,
    pub dev_addr: String,
    pub fcnt: u16,
    pub mtype: MType,
    pub frequency_mhz: f64,
    pub dr: DataRate,
    pub sf: u8,
    pub rssi_dbm: i32,
    pub snr_db: f64,
    pub gateway_id: u32,
    pub crc_ok: bool,
    pub payload_hex: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<usize>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ack: Option<AckOutcome>,
}

impl PacketRecord {
    pub fn frequency_hz(&self) -> u32 {
        (self.frequency_mhz * 1e6).round() as u32
    }

    /// PHY payload length: the 13-byte envelope plus FRMPayload.
    pub fn phy_len(&self) -> usize {
        crate::airtime::FRAME_OVERHEAD + self.payload_hex.len() / 2
    }

    /// Air interval of the transmission this row describes.
    pub fn air_interval(&self) -> Option<(Micros, Micros)> {
        let toa = time_on_air(&self.dr.params(), self.phy_len()).ok()?;
        Some((self.timestamp.saturating_sub(toa), toa))
    }

    /// Rows that stand for a transmission rather than an extra gateway copy.
    pub fn is_primary(&self) -> bool {
        self.duplicate_of.is_none()
    }

    pub fn is_data(&self) -> bool {
        !self.mtype.is_join()
    }
}

pub fn append_log(record: &PacketRecord, sink: &mut impl Write) -> io::Result<()> {
    serde_json::to_writer(&mut *sink, record)?;
    sink.write_all(b"\n")
}

pub fn write_log(records: &[PacketRecord], sink: &mut impl Write) -> io::Result<()> {
    records.iter().try_for_each(|r| append_log(r, sink))
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn read_log(reader: impl BufRead) -> Result<Vec<PacketRecord>, LogError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| LogError::Parse { line: i + 1, source })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Accepted { line: usize },
    Duplicate { line: usize, of: usize },
    Rejected { line: usize, reason: Status },
}

impl IngestOutcome {
    pub fn line(&self) -> usize {
        match *self {
            IngestOutcome::Accepted { line }
            | IngestOutcome::Duplicate { line, .. }
            | IngestOutcome::Rejected { line, .. } => line,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IngestCounts {
    pub ingested: u64,
    pub accepted: u64,
    pub duplicates: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone)]
struct DedupEntry {
    first_seen: Micros,
    line: usize,
    copies: Vec<(u32, i32)>,
}

type DedupKey = (u32, u16, [u8; 4]);

/// Gateway-side transmit state: its own duty ledger and booked airtime.
#[derive(Debug, Clone)]
pub struct GatewayTx {
    pub id: u32,
    pub ledger: DutyLedger,
    busy: Vec<(Micros, Micros)>,
}

impl GatewayTx {
    pub fn new(id: u32, mode: DutyMode) -> Self {
        Self {
            id,
            ledger: DutyLedger::new(mode),
            busy: Vec::new(),
        }
    }

    fn busy_at(&self, start: Micros, toa: Micros) -> Option<Micros> {
        self.busy
            .iter()
            .filter(|(s, e)| *s < start + toa && start < *e)
            .map(|(_, e)| *e)
            .max()
    }

    fn book(&mut self, plan: &ChannelPlan, freq_hz: u32, start: Micros, toa: Micros) {
        let ch = plan.get(freq_hz).expect("downlink channel in plan");
        self.ledger.record(ch, start, toa);
        self.busy.push((start, start + toa));
    }

    pub fn prune(&mut self, now: Micros) {
        self.ledger.prune(now);
        self.busy.retain(|(_, e)| *e > now);
    }
}

/// What the network needs to know to answer a confirmed uplink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AckRequest {
    pub dev_addr: u32,
    pub class: DeviceClass,
    pub uplink_end: Micros,
    pub uplink_freq_hz: u32,
    pub uplink_dr: DataRate,
    /// When the server has the uplink and may start planning.
    pub ready_at: Micros,
    /// Last instant the device still waits for the ACK (Class B and C).
    pub deadline: Micros,
    pub ping_nb: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedDownlink {
    pub gateway_id: u32,
    pub start: Micros,
    pub toa: Micros,
    pub freq_hz: u32,
    pub dr: DataRate,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AckPlan {
    Planned(PlannedDownlink),
    Dropped(AckOutcome),
}

#[derive(Debug, Clone)]
struct DeviceEntry {
    session: Session,
    last_fcnt: Option<u16>,
}

#[derive(Debug, Clone, Default)]
pub struct NetworkServer {
    plan: ChannelPlan,
    devices: HashMap<u32, DeviceEntry>,
    app_keys: HashMap<DevEui, Key>,
    used_nonces: HashSet<(DevEui, u16)>,
    join_nonce: u32,
    dedup: HashMap<DedupKey, DedupEntry>,
    log: Vec<PacketRecord>,
    counts: IngestCounts,
    reassembler: Reassembler,
    datagrams: Vec<(DevEui, MeterDatagram)>,
    downlinks: Vec<AirtimeEntry>,
}

impl NetworkServer {
    pub fn new(plan: ChannelPlan) -> Self {
        Self {
            plan,
            ..Self::default()
        }
    }

    /// Registers a personalized device (or replaces its session).
    pub fn register_session(&mut self, session: Session) {
        self.devices.insert(
            session.dev_addr,
            DeviceEntry {
                session,
                last_fcnt: None,
            },
        );
    }

    pub fn register_app_key(&mut self, dev_eui: DevEui, app_key: Key) {
        self.app_keys.insert(dev_eui, app_key);
    }

    pub fn session(&self, dev_addr: u32) -> Option<&Session> {
        self.devices.get(&dev_addr).map(|d| &d.session)
    }

    pub fn log(&self) -> &[PacketRecord] {
        &self.log
    }

    pub fn into_log(self) -> Vec<PacketRecord> {
        self.log
    }

    pub fn counts(&self) -> IngestCounts {
        self.counts
    }

    pub fn datagrams(&self) -> &[(DevEui, MeterDatagram)] {
        &self.datagrams
    }

    /// Every downlink the server booked, for auditing gateway duty cycles.
    pub fn downlinks(&self) -> &[AirtimeEntry] {
        &self.downlinks
    }

    pub fn set_ack(&mut self, line: usize, outcome: AckOutcome) {
        if let Some(r) = self.log.get_mut(line) {
            r.ack = Some(outcome);
        }
    }

    fn push_row(&mut self, row: PacketRecord) -> usize {
        self.log.push(row);
        self.log.len() - 1
    }

    fn row(&self, rec: &GatewayRecord, frame: Option<&Frame>, status: Status) -> PacketRecord {
        let dev_addr = frame.map_or(0, |f| f.dev_addr);
        let dev_eui = match frame {
            Some(f) if f.mtype == MType::JoinRequest => JoinRequest::from_frame(f).ok().map(|j| j.dev_eui),
            Some(f) => self.devices.get(&f.dev_addr).map(|d| d.session.dev_eui),
            None => None,
        };
        PacketRecord {
            timestamp: rec.receive_time,
            dev_eui,
            dev_addr: format!("{dev_addr:08x}"),
            fcnt: frame.map_or(0, |f| f.fcnt),
            mtype: frame.map_or(MType::UnconfirmedUp, |f| f.mtype),
            frequency_mhz: f64::from(rec.frequency_hz) / 1e6,
            dr: DataRate::from_sf(rec.sf).unwrap_or(DataRate::DR0),
            sf: rec.sf,
            rssi_dbm: rec.rssi_dbm,
            snr_db: rec.snr_db,
            gateway_id: rec.gateway_id,
            crc_ok: rec.crc_ok,
            payload_hex: frame.map_or_else(String::new, |f| hex::encode(&f.payload)),
            duplicate_of: None,
            status,
            ack: None,
        }
    }

    fn reject(&mut self, rec: &GatewayRecord, frame: Option<&Frame>, reason: Status) -> IngestOutcome {
        let mut row = self.row(rec, frame, reason);
        if let Some(f) = frame {
            row.duplicate_of = self.dedup.get(&(f.dev_addr, f.fcnt, f.mic)).map(|e| e.line);
        }
        let line = self.push_row(row);
        self.counts.rejected += 1;
        IngestOutcome::Rejected { line, reason }
    }

    /// Processes one gateway copy and appends its log row.
    pub fn ingest(&mut self, rec: &GatewayRecord) -> IngestOutcome {
        self.counts.ingested += 1;
        let frame = match Frame::parse(&rec.frame) {
            Ok(f) => f,
            Err(_) => {
                let reason = if rec.crc_ok {
                    Status::RejectedMalformed
                } else {
                    Status::CrcError
                };
                return self.reject(rec, None, reason);
            }
        };
        if !rec.crc_ok {
            return self.reject(rec, Some(&frame), Status::CrcError);
        }
        let key = (frame.dev_addr, frame.fcnt, frame.mic);
        if let Some(entry) = self.dedup.get_mut(&key) {
            if rec.receive_time.saturating_sub(entry.first_seen) <= DEDUP_WINDOW {
                let of = entry.line;
                if !entry.copies.iter().any(|(g, _)| *g == rec.gateway_id) {
                    entry.copies.push((rec.gateway_id, rec.rssi_dbm));
                }
                let mut row = self.row(rec, Some(&frame), Status::Duplicate);
                row.duplicate_of = Some(of);
                let line = self.push_row(row);
                self.counts.duplicates += 1;
                return IngestOutcome::Duplicate { line, of };
            }
        }
        match frame.mtype {
            MType::JoinRequest => self.ingest_join(rec, &frame, key),
            MType::UnconfirmedUp | MType::ConfirmedUp => self.ingest_data(rec, &frame, key),
            _ => self.reject(rec, Some(&frame), Status::RejectedMalformed),
        }
    }

    fn accept(&mut self, rec: &GatewayRecord, frame: &Frame, key: DedupKey) -> IngestOutcome {
        let row = self.row(rec, Some(frame), Status::Accepted);
        let line = self.push_row(row);
        self.dedup.insert(
            key,
            DedupEntry {
                first_seen: rec.receive_time,
                line,
                copies: vec![(rec.gateway_id, rec.rssi_dbm)],
            },
        );
        self.counts.accepted += 1;
        IngestOutcome::Accepted { line }
    }

    fn ingest_data(&mut self, rec: &GatewayRecord, frame: &Frame, key: DedupKey) -> IngestOutcome {
        let Some(dev) = self.devices.get(&frame.dev_addr) else {
            return self.reject(rec, Some(frame), Status::RejectedUnknownDevice);
        };
        if !verify_mic(frame, &dev.session.nwk_s_key) {
            return self.reject(rec, Some(frame), Status::RejectedMic);
        }
        if dev.last_fcnt.is_some_and(|last| frame.fcnt <= last) {
            return self.reject(rec, Some(frame), Status::RejectedReplay);
        }
        let dev = self.devices.get_mut(&frame.dev_addr).expect("checked above");
        dev.last_fcnt = Some(frame.fcnt);
        let session = dev.session.clone();
        let out = self.accept(rec, frame, key);
        self.hand_off(&session, frame, rec.receive_time);
        out
    }

    fn hand_off(&mut self, session: &Session, frame: &Frame, now: Micros) {
        let plain = session.open_payload(frame);
        let datagram = match frame.fport {
            PORT_DATAGRAM => MeterDatagram::decode(&plain).ok(),
            PORT_FRAGMENT => Fragment::parse(&plain).ok().and_then(|frag| {
                match self.reassembler.push(session.dev_eui.as_u64(), &frag, now) {
                    Ok(Reassembly::Complete(bytes)) => MeterDatagram::decode(&bytes).ok(),
                    _ => None,
                }
            }),
            _ => None,
        };
        if let Some(d) = datagram {
            self.datagrams.push((session.dev_eui, d));
        }
        self.reassembler.expire(now);
    }

    fn ingest_join(&mut self, rec: &GatewayRecord, frame: &Frame, key: DedupKey) -> IngestOutcome {
        let Ok(req) = JoinRequest::from_frame(frame) else {
            return self.reject(rec, Some(frame), Status::RejectedMalformed);
        };
        let Some(app_key) = self.app_keys.get(&req.dev_eui).copied() else {
            return self.reject(rec, Some(frame), Status::RejectedUnknownDevice);
        };
        if !verify_mic(frame, &app_key) {
            return self.reject(rec, Some(frame), Status::RejectedMic);
        }
        if !self.used_nonces.insert((req.dev_eui, req.dev_nonce)) {
            return self.reject(rec, Some(frame), Status::RejectedReplay);
        }
        self.join_nonce += 1;
        let dev_addr = (NET_ID & 0x7f) << 25 | (req.dev_eui.as_u64() as u32 & 0x01ff_ffff);
        let (_, session) = match accept_join(&req, &app_key, self.join_nonce, dev_addr) {
            Ok(v) => v,
            Err(_) => return self.reject(rec, Some(frame), Status::RejectedMalformed),
        };
        self.devices.retain(|_, d| d.session.dev_eui != req.dev_eui);
        self.register_session(session);
        self.accept(rec, frame, key)
    }

    /// Join-accept frame for the session most recently created for `dev_eui`.
    pub fn join_accept_frame(&self, dev_eui: DevEui) -> Option<Frame> {
        let app_key = self.app_keys.get(&dev_eui)?;
        let dev = self.devices.values().find(|d| d.session.dev_eui == dev_eui)?;
        let accept = JoinAccept {
            join_nonce: self.join_nonce & 0x00ff_ffff,
            net_id: NET_ID,
            dev_addr: dev.session.dev_addr,
        };
        Some(accept.to_frame(app_key))
    }

    /// Gateways that heard the accepted frame at `line`, with their RSSI.
    pub fn copies_of(&self, line: usize) -> Vec<(u32, i32)> {
        self.dedup
            .values()
            .find(|e| e.line == line)
            .map(|e| e.copies.clone())
            .unwrap_or_default()
    }

    /// Drops dedup state that can no longer match.
    pub fn prune(&mut self, now: Micros) {
        self.dedup
            .retain(|_, e| now.saturating_sub(e.first_seen) <= DEDUP_WINDOW);
    }

    /// Appends a row for a transmission no gateway delivered.
    pub fn log_lost(&mut self, rec: &GatewayRecord, reason: Status) -> usize {
        debug_assert!(reason.is_lost());
        let frame = Frame::parse(&rec.frame).ok();
        let row = self.row(rec, frame.as_ref(), reason);
        let line = self.push_row(row);
        if let Some(f) = frame {
            self.dedup.insert(
                (f.dev_addr, f.fcnt, f.mic),
                DedupEntry {
                    first_seen: rec.receive_time,
                    line,
                    copies: Vec::new(),
                },
            );
        }
        line
    }

    /// Plans the ACK for a confirmed uplink through `gw` (see [`choose_downlink_gateway`]).
    pub fn schedule_ack(&mut self, gw: &mut GatewayTx, req: &AckRequest) -> AckPlan {
        let frame = match self.devices.get_mut(&req.dev_addr) {
            Some(d) => d.session.build_ack(),
            None => return AckPlan::Dropped(AckOutcome::UplinkLost),
        };
        self.plan_downlink(gw, req, frame)
    }

    /// Plans a join-accept in the two join windows.
    pub fn schedule_join_accept(&mut self, gw: &mut GatewayTx, req: &AckRequest, dev_eui: DevEui) -> AckPlan {
        let Some(frame) = self.join_accept_frame(dev_eui) else {
            return AckPlan::Dropped(AckOutcome::UplinkLost);
        };
        let rx1 = req.uplink_end + JOIN_ACCEPT_DELAY1;
        let rx2 = req.uplink_end + JOIN_ACCEPT_DELAY2;
        let rx2_ch = self.plan.rx2().map(|c| c.center_freq_hz).unwrap_or(crate::regulation::RX2_FREQ_HZ);
        let candidates = vec![
            (rx1, req.uplink_freq_hz, req.uplink_dr),
            (rx2, rx2_ch, class::RX2_DR),
        ];
        self.try_candidates(gw, req, frame, candidates)
    }

    fn plan_downlink(&mut self, gw: &mut GatewayTx, req: &AckRequest, frame: Frame) -> AckPlan {
        let [w1, w2] = class::rx_windows(req.uplink_end, req.uplink_freq_hz, req.uplink_dr);
        let mut candidates = vec![(w1.opens, w1.freq_hz, w1.dr)];
        match req.class {
            DeviceClass::A => candidates.push((w2.opens, w2.freq_hz, w2.dr)),
            DeviceClass::B => {
                candidates.push((w2.opens, w2.freq_hz, w2.dr));
                let toa = ack_toa(w2.dr, &frame);
                let mut t = req.ready_at.max(w2.opens + Micros(1));
                loop {
                    let slot = class::next_ping_slot(t, req.dev_addr, req.ping_nb);
                    if slot + toa > req.deadline {
                        break;
                    }
                    candidates.push((slot, w2.freq_hz, w2.dr));
                    t = slot + Micros(1);
                }
            }
            DeviceClass::C => {
                let toa = ack_toa(w2.dr, &frame);
                if let Some(t) = self.earliest_free(gw, req.ready_at, w2.freq_hz, toa) {
                    if t + toa <= req.deadline {
                        candidates.push((t, w2.freq_hz, w2.dr));
                    }
                }
                // Keep the duty verdict informative when nothing fits.
                candidates.push((req.ready_at.max(w2.opens), w2.freq_hz, w2.dr));
            }
        }
        self.try_candidates(gw, req, frame, candidates)
    }

    fn earliest_free(&self, gw: &GatewayTx, from: Micros, freq_hz: u32, toa: Micros) -> Option<Micros> {
        let ch = self.plan.get(freq_hz)?;
        let mut t = from;
        loop {
            t = gw.ledger.earliest_start(ch, t, toa).ok()?;
            match gw.busy_at(t, toa) {
                Some(end) => t = end,
                None => return Some(t),
            }
        }
    }

    fn try_candidates(
        &mut self,
        gw: &mut GatewayTx,
        req: &AckRequest,
        frame: Frame,
        candidates: Vec<(Micros, u32, DataRate)>,
    ) -> AckPlan {
        let mut reachable = false;
        let mut duty_blocked = false;
        for (start, freq_hz, dr) in candidates {
            let toa = ack_toa(dr, &frame);
            if start < req.ready_at || start + toa > req.deadline {
                continue;
            }
            reachable = true;
            let Some(ch) = self.plan.get(freq_hz) else { continue };
            if !gw.ledger.admits_at(ch, start, toa) {
                duty_blocked = true;
                continue;
            }
            if gw.busy_at(start, toa).is_some() {
                continue;
            }
            gw.book(&self.plan, freq_hz, start, toa);
            self.downlinks.push(AirtimeEntry {
                transmitter: format!("gw{}", gw.id),
                freq_hz,
                start,
                toa,
            });
            return AckPlan::Planned(PlannedDownlink {
                gateway_id: gw.id,
                start,
                toa,
                freq_hz,
                dr,
                frame,
            });
        }
        AckPlan::Dropped(if reachable && duty_blocked {
            AckOutcome::DutyExhausted
        } else {
            AckOutcome::WindowMissed
        })
    }
}

fn ack_toa(dr: DataRate, frame: &Frame) -> Micros {
    time_on_air(&dr.params(), frame.len()).expect("data-rate parameters are valid")
}

/// Gateway with the strongest copy; ties go to the lowest id.
pub fn choose_downlink_gateway(copies: &[(u32, i32)]) -> Option<u32> {
    copies
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|c| c.0)
}

/// Per-node counters recomputed from a log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogNodeSummary {
    pub sent: u64,
    pub received: u64,
    pub ack_requested: u64,
    pub ack_missed: u64,
    pub rssi: Vec<i32>,
    pub snr: Vec<f64>,
}

/// Groups primary data rows by device. Sent counts one row per transmission,
/// received counts accepted rows; link quality comes from accepted copies.
pub fn summarize_log(log: &[PacketRecord]) -> BTreeMap<String, LogNodeSummary> {
    let mut out: BTreeMap<String, LogNodeSummary> = BTreeMap::new();
    for r in log.iter().filter(|r| r.is_data() && r.is_primary()) {
        let name = r.dev_eui.map_or_else(|| r.dev_addr.clone(), |e| e.to_string());
        let s = out.entry(name).or_default();
        s.sent += 1;
        if r.status == Status::Accepted {
            s.received += 1;
            s.rssi.push(r.rssi_dbm);
            s.snr.push(r.snr_db);
        }
        if let Some(a) = r.ack {
            s.ack_requested += 1;
            if a.is_miss() {
                s.ack_missed += 1;
            }
        }
    }
    out
}

/// Received packets per channel.
pub fn channel_histogram(log: &[PacketRecord]) -> BTreeMap<u32, u64> {
    let mut out = BTreeMap::new();
    for r in log.iter().filter(|r| r.status == Status::Accepted) {
        *out.entry(r.frequency_hz()).or_insert(0) += 1;
    }
    out
}

/// Transmissions recorded in a log, one per primary row, keyed by device.
pub fn airtime_entries(log: &[PacketRecord]) -> Vec<AirtimeEntry> {
    log.iter()
        .filter(|r| r.is_primary() && (r.status == Status::Accepted || r.status.is_lost()))
        .filter_map(|r| {
            let (start, toa) = r.air_interval()?;
            Some(AirtimeEntry {
                transmitter: r.dev_eui.map_or_else(|| r.dev_addr.clone(), |e| e.to_string()),
                freq_hz: r.frequency_hz(),
                start,
                toa,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mac::session::otaa_join;
    use rand::SeedableRng;

    fn device() -> Session {
        Session::abp_from_eui(DevEui::from_u64(0x70b3_d500_0000_0001))
    }

    fn record(gw: u32, t: Micros, rssi: i32, frame: &Frame) -> GatewayRecord {
        GatewayRecord {
            gateway_id: gw,
            receive_time: t,
            frequency_hz: 868_100_000,
            sf: 7,
            rssi_dbm: rssi,
            snr_db: 9.25,
            crc_ok: true,
            frame: frame.to_bytes(),
        }
    }

    fn server_with(dev: &Session) -> NetworkServer {
        let mut s = NetworkServer::new(ChannelPlan::eu868());
        s.register_session(dev.clone());
        s
    }

    #[test]
    fn three_gateways_one_accept() {
        let mut dev = device();
        let mut srv = server_with(&dev);
        let f = dev.build_uplink(1, b"hi", false, DataRate::DR5).unwrap();
        let t = Micros::from_secs(1);
        let out: Vec<_> = [(1, -90), (2, -80), (3, -100)]
            .iter()
            .map(|&(g, r)| srv.ingest(&record(g, t, r, &f)))
            .collect();
        assert_eq!(out[0], IngestOutcome::Accepted { line: 0 });
        assert_eq!(out[1], IngestOutcome::Duplicate { line: 1, of: 0 });
        assert_eq!(out[2], IngestOutcome::Duplicate { line: 2, of: 0 });
        assert_eq!(srv.log()[2].duplicate_of, Some(0));
        assert_eq!(choose_downlink_gateway(&srv.copies_of(0)), Some(2));
        let c = srv.counts();
        assert_eq!(c.accepted + c.duplicates + c.rejected, c.ingested);
    }

    #[test]
    fn dedup_idempotent() {
        let mut dev = device();
        let mut srv = server_with(&dev);
        let f = dev.build_uplink(1, b"x", false, DataRate::DR5).unwrap();
        let r = record(1, Micros(10), -70, &f);
        assert_eq!(srv.ingest(&r), IngestOutcome::Accepted { line: 0 });
        assert_eq!(srv.ingest(&r), IngestOutcome::Duplicate { line: 1, of: 0 });
        assert_eq!(srv.log().len(), 2);
        assert_eq!(srv.copies_of(0).len(), 1);
        assert_eq!(srv.log().iter().filter(|r| r.status == Status::Accepted).count(), 1);
    }

    #[test]
    fn replay_and_bad_mic_rejected() {
        let mut dev = device();
        let mut srv = server_with(&dev);
        let a = dev.build_uplink(1, b"a", false, DataRate::DR5).unwrap();
        let b = dev.build_uplink(1, b"b", false, DataRate::DR5).unwrap();
        srv.ingest(&record(1, Micros::from_secs(1), -70, &b));
        let replay = srv.ingest(&record(1, Micros::from_secs(10), -70, &a));
        assert!(matches!(replay, IngestOutcome::Rejected { reason: Status::RejectedReplay, .. }));
        let late_copy = srv.ingest(&record(2, Micros::from_secs(10), -70, &b));
        assert!(matches!(late_copy, IngestOutcome::Rejected { reason: Status::RejectedReplay, .. }));
        let mut c = dev.build_uplink(1, b"c", false, DataRate::DR5).unwrap();
        c.mic[0] ^= 1;
        let bad = srv.ingest(&record(1, Micros::from_secs(20), -70, &c));
        assert!(matches!(bad, IngestOutcome::Rejected { reason: Status::RejectedMic, .. }));
        let mut other = Session::abp_from_eui(DevEui::from_u64(99));
        let u = other.build_uplink(1, b"u", false, DataRate::DR5).unwrap();
        let unk = srv.ingest(&record(1, Micros::from_secs(30), -70, &u));
        assert!(matches!(
            unk,
            IngestOutcome::Rejected {
                reason: Status::RejectedUnknownDevice,
                ..
            }
        ));
    }

    #[test]
    fn crc_failures_logged_not_forwarded() {
        let mut dev = device();
        let mut srv = server_with(&dev);
        let f = dev.build_uplink(1, b"x", false, DataRate::DR5).unwrap();
        let mut r = record(1, Micros(5), -70, &f);
        r.crc_ok = false;
        assert!(matches!(srv.ingest(&r), IngestOutcome::Rejected { reason: Status::CrcError, .. }));
        assert_eq!(srv.ingest(&record(2, Micros(5), -75, &f)), IngestOutcome::Accepted { line: 1 });
    }

    #[test]
    fn gateway_choice() {
        assert_eq!(choose_downlink_gateway(&[(1, -80), (2, -95)]), Some(1));
        assert_eq!(choose_downlink_gateway(&[(4, -99)]), Some(4));
        assert_eq!(choose_downlink_gateway(&[(5, -90), (3, -90), (7, -91)]), Some(3));
        assert_eq!(choose_downlink_gateway(&[]), None);
    }

    fn ack_req(class: DeviceClass, dev: &Session, end: Micros) -> AckRequest {
        AckRequest {
            dev_addr: dev.dev_addr,
            class,
            uplink_end: end,
            uplink_freq_hz: 868_100_000,
            uplink_dr: DataRate::DR5,
            ready_at: end,
            deadline: end + Micros::from_secs(4),
            ping_nb: 32,
        }
    }

    #[test]
    fn unloaded_class_a_uses_rx1() {
        let dev = device();
        let mut srv = server_with(&dev);
        let mut gw = GatewayTx::new(1, DutyMode::PerSubBand);
        let end = Micros::from_secs(100);
        match srv.schedule_ack(&mut gw, &ack_req(DeviceClass::A, &dev, end)) {
            AckPlan::Planned(p) => {
                assert_eq!(p.start, end + class::RX1_DELAY);
                assert_eq!(p.freq_hz, 868_100_000);
                assert!(p.frame.ack());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exhausted_gateway_drops_a_but_serves_c_later() {
        let dev = device();
        let mut srv = server_with(&dev);
        let plan = ChannelPlan::eu868();
        let mut gw = GatewayTx::new(1, DutyMode::PerSubBand);
        let end = Micros::from_secs(100);
        // Earlier downlinks close both sub-bands until 2.5 s after the uplink.
        let g1 = plan.get(868_100_000).unwrap();
        let g3 = plan.rx2().unwrap();
        gw.ledger.record(g1, Micros::ZERO, Micros::from_secs(2));
        gw.ledger.record(g3, end + Micros::from_millis(2_500) - Micros(9 * 100_000) - Micros(100_000), Micros(100_000));
        let a = srv.schedule_ack(&mut gw.clone(), &ack_req(DeviceClass::A, &dev, end));
        assert_eq!(a, AckPlan::Dropped(AckOutcome::DutyExhausted));
        match srv.schedule_ack(&mut gw, &ack_req(DeviceClass::C, &dev, end)) {
            AckPlan::Planned(p) => {
                assert_eq!(p.start, end + Micros::from_millis(2_500));
                assert_eq!(p.freq_hz, crate::regulation::RX2_FREQ_HZ);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn late_server_misses_windows() {
        let dev = device();
        let mut srv = server_with(&dev);
        let mut gw = GatewayTx::new(1, DutyMode::PerSubBand);
        let end = Micros::from_secs(100);
        let mut req = ack_req(DeviceClass::A, &dev, end);
        req.ready_at = end + Micros::from_millis(2_100);
        assert_eq!(
            srv.schedule_ack(&mut gw, &req),
            AckPlan::Dropped(AckOutcome::WindowMissed)
        );
    }

    #[test]
    fn booked_downlinks_respect_gateway_duty() {
        let dev = device();
        let mut srv = server_with(&dev);
        let mut gw = GatewayTx::new(1, DutyMode::PerSubBand);
        for i in 0..300u64 {
            let class = [DeviceClass::A, DeviceClass::B, DeviceClass::C][(i % 3) as usize];
            srv.schedule_ack(&mut gw, &ack_req(class, &dev, Micros::from_millis(i * 1_700)));
        }
        assert!(srv.downlinks().len() > 50);
        let v = crate::regulation::audit(
            &ChannelPlan::eu868(),
            DutyMode::PerSubBand,
            DutyLedger::DEFAULT_WINDOW,
            srv.downlinks(),
        )
        .unwrap();
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn join_flow() {
        let mut srv = NetworkServer::new(ChannelPlan::eu868());
        let eui = DevEui::from_u64(42);
        let app_key = [9u8; 16];
        srv.register_app_key(eui, app_key);
        let req = JoinRequest {
            dev_eui: eui,
            dev_nonce: 17,
        };
        let f = req.to_frame(&app_key);
        assert_eq!(srv.ingest(&record(1, Micros(1), -80, &f)), IngestOutcome::Accepted { line: 0 });
        let accept = srv.join_accept_frame(eui).unwrap();
        let dev = crate::mac::session::complete_join(&req, &accept, &app_key).unwrap();
        assert_eq!(srv.session(dev.dev_addr), Some(&dev));
        assert!(matches!(
            srv.ingest(&record(1, Micros::from_secs(60), -80, &f)),
            IngestOutcome::Rejected { .. }
        ));
        let _ = otaa_join(eui, &app_key, 1, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
    }

    #[test]
    fn datagrams_reassembled_from_fragments() {
        let mut dev = device();
        let mut srv = server_with(&dev);
        let d = MeterDatagram {
            meter_id: 7,
            datagram_seq: 3,
            ..Default::default()
        };
        let [a, b] = crate::codec::fragment(&d.encode()).unwrap();
        for (i, frag) in [b, a].iter().enumerate() {
            let f = dev.build_uplink(PORT_FRAGMENT, &frag.to_bytes(), false, DataRate::DR0).unwrap();
            srv.ingest(&record(1, Micros::from_secs(i as u64 * 300), -80, &f));
        }
        assert_eq!(srv.datagrams(), &[(dev.dev_eui, d)]);
    }

    #[test]
    fn log_lines_round_trip() {
        let mut dev = device();
        let mut srv = server_with(&dev);
        let f = dev.build_uplink(1, b"abc", true, DataRate::DR5).unwrap();
        srv.ingest(&record(1, Micros(77), -71, &f));
        srv.ingest(&record(2, Micros(77), -72, &f));
        srv.set_ack(0, AckOutcome::Delivered);
        let mut buf = Vec::new();
        write_log(srv.log(), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().contains("\"duplicate_of\":0"));
        let back = read_log(&buf[..]).unwrap();
        assert_eq!(back, srv.log());
        let summary = summarize_log(&back);
        let s = &summary[&dev.dev_eui.to_string()];
        assert_eq!((s.sent, s.received, s.ack_requested, s.ack_missed), (1, 1, 1, 0));
    }
}
