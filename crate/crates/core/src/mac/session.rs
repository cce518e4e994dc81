use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::crypto::{self, AesCmac, Direction, Key};
use super::frame::{Frame, MType, FCTRL_ACK};
use super::MacError;
use crate::airtime::DataRate;

/// 64-bit device identifier, written as 16 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DevEui(pub [u8; 8]);

impl DevEui {
    pub fn from_u64(v: u64) -> Self {
        DevEui(v.to_be_bytes())
    }

    pub fn as_u64(&self) -> u64 {
        u64::from_be_bytes(self.0)
    }
}

impl fmt::Display for DevEui {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for DevEui {
    type Err = MacError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|_| MacError::BadEui(s.to_owned()))?;
        let arr: [u8; 8] = bytes
            .try_into()
            .map_err(|_| MacError::BadEui(s.to_owned()))?;
        Ok(DevEui(arr))
    }
}

impl TryFrom<String> for DevEui {
    type Error = MacError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DevEui> for String {
    fn from(e: DevEui) -> String {
        e.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Otaa,
    #[default]
    Abp,
}

/// Network identifier the simulated server hands out (7-bit NwkID 0x13).
pub const NET_ID: u32 = 0x00_0013;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub dev_eui: DevEui,
    pub dev_addr: u32,
    pub nwk_s_key: Key,
    pub app_s_key: Key,
    /// Counter the next uplink will carry.
    pub fcnt_up: u16,
    pub fcnt_down: u16,
    pub activation: Activation,
    exhausted: bool,
}

impl Session {
    /// Activation by personalization: keys are provisioned and never change.
    pub fn abp(dev_eui: DevEui, dev_addr: u32, nwk_s_key: Key, app_s_key: Key) -> Self {
        Self {
            dev_eui,
            dev_addr,
            nwk_s_key,
            app_s_key,
            fcnt_up: 0,
            fcnt_down: 0,
            activation: Activation::Abp,
            exhausted: false,
        }
    }

    /// ABP provisioning derived from the EUI, so reruns see identical keys.
    pub fn abp_from_eui(dev_eui: DevEui) -> Self {
        let prov_key = [0xab; 16];
        let mut nwk_seed = [0u8; 16];
        nwk_seed[..8].copy_from_slice(&dev_eui.0);
        let mut app_seed = nwk_seed;
        app_seed[15] = 1;
        use crypto::KeyedPrimitive;
        let nwk = AesCmac.block(&prov_key, nwk_seed);
        let app = AesCmac.block(&prov_key, app_seed);
        let dev_addr = (NET_ID & 0x7f) << 25 | (dev_eui.as_u64() as u32 & 0x01ff_ffff);
        Self::abp(dev_eui, dev_addr, nwk, app)
    }

    /// Builds, encrypts and authenticates the next uplink, advancing `fcnt_up`.
    pub fn build_uplink(
        &mut self,
        fport: u8,
        payload: &[u8],
        confirmed: bool,
        dr: DataRate,
    ) -> Result<Frame, MacError> {
        let max = dr.max_app_payload();
        if payload.len() > max {
            return Err(MacError::PayloadTooLarge {
                len: payload.len(),
                max,
            });
        }
        if self.exhausted {
            return Err(MacError::CounterExhausted);
        }
        let fcnt = self.fcnt_up;
        let mut frame = Frame {
            mtype: if confirmed {
                MType::ConfirmedUp
            } else {
                MType::UnconfirmedUp
            },
            dev_addr: self.dev_addr,
            fctrl: 0,
            fcnt,
            fport,
            payload: crypto::crypt_payload(
                &AesCmac,
                &self.app_s_key,
                Direction::Up,
                self.dev_addr,
                u32::from(fcnt),
                payload,
            ),
            mic: [0; 4],
        };
        frame.mic = frame_mic(&frame, &self.nwk_s_key);
        match self.fcnt_up.checked_add(1) {
            Some(next) => self.fcnt_up = next,
            None => self.exhausted = true,
        }
        Ok(frame)
    }

    /// Empty confirmed-uplink acknowledgment from the network side.
    pub fn build_ack(&mut self) -> Frame {
        let fcnt = self.fcnt_down;
        self.fcnt_down = self.fcnt_down.wrapping_add(1);
        let mut frame = Frame {
            mtype: MType::UnconfirmedDown,
            dev_addr: self.dev_addr,
            fctrl: FCTRL_ACK,
            fcnt,
            fport: 0,
            payload: Vec::new(),
            mic: [0; 4],
        };
        frame.mic = frame_mic(&frame, &self.nwk_s_key);
        frame
    }

    pub fn open_payload(&self, frame: &Frame) -> Vec<u8> {
        let dir = if frame.mtype.is_uplink() {
            Direction::Up
        } else {
            Direction::Down
        };
        crypto::crypt_payload(
            &AesCmac,
            &self.app_s_key,
            dir,
            frame.dev_addr,
            u32::from(frame.fcnt),
            &frame.payload,
        )
    }
}

fn frame_mic(frame: &Frame, key: &Key) -> [u8; 4] {
    if frame.mtype.is_join() {
        return crypto::join_mic(&AesCmac, key, &frame.header_and_payload());
    }
    let dir = if frame.mtype.is_uplink() {
        Direction::Up
    } else {
        Direction::Down
    };
    crypto::data_mic(
        &AesCmac,
        key,
        dir,
        frame.dev_addr,
        u32::from(frame.fcnt),
        &frame.header_and_payload(),
    )
}

/// Recomputes the tag with `key` (NwkSKey for data frames, AppKey for joins).
pub fn verify_mic(frame: &Frame, key: &Key) -> bool {
    frame_mic(frame, key) == frame.mic
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinRequest {
    pub dev_eui: DevEui,
    pub dev_nonce: u16,
}

impl JoinRequest {
    pub fn to_frame(&self, app_key: &Key) -> Frame {
        let mut payload = self.dev_eui.0.to_vec();
        payload.extend_from_slice(&self.dev_nonce.to_le_bytes());
        let mut frame = Frame {
            mtype: MType::JoinRequest,
            dev_addr: 0,
            fctrl: 0,
            fcnt: 0,
            fport: 0,
            payload,
            mic: [0; 4],
        };
        frame.mic = frame_mic(&frame, app_key);
        frame
    }

    pub fn from_frame(frame: &Frame) -> Result<Self, MacError> {
        if frame.mtype != MType::JoinRequest || frame.payload.len() != 10 {
            return Err(MacError::MalformedJoin);
        }
        Ok(JoinRequest {
            dev_eui: DevEui(frame.payload[..8].try_into().unwrap()),
            dev_nonce: u16::from_le_bytes([frame.payload[8], frame.payload[9]]),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinAccept {
    pub join_nonce: u32,
    pub net_id: u32,
    pub dev_addr: u32,
}

impl JoinAccept {
    pub fn to_frame(&self, app_key: &Key) -> Frame {
        let mut payload = self.join_nonce.to_le_bytes()[..3].to_vec();
        payload.extend_from_slice(&self.net_id.to_le_bytes()[..3]);
        payload.extend_from_slice(&self.dev_addr.to_le_bytes());
        // DLSettings (RX1 offset 0, RX2 DR0) and RxDelay 1 s.
        payload.extend_from_slice(&[0x00, 0x01]);
        let mut frame = Frame {
            mtype: MType::JoinAccept,
            dev_addr: 0,
            fctrl: 0,
            fcnt: 0,
            fport: 0,
            payload,
            mic: [0; 4],
        };
        frame.mic = frame_mic(&frame, app_key);
        frame
    }

    pub fn from_frame(frame: &Frame) -> Result<Self, MacError> {
        let p = &frame.payload;
        if frame.mtype != MType::JoinAccept || p.len() != 12 {
            return Err(MacError::MalformedJoin);
        }
        Ok(JoinAccept {
            join_nonce: u32::from_le_bytes([p[0], p[1], p[2], 0]),
            net_id: u32::from_le_bytes([p[3], p[4], p[5], 0]),
            dev_addr: u32::from_le_bytes(p[6..10].try_into().unwrap()),
        })
    }
}

/// Network side of a join: derives the session the device will also derive.
pub fn accept_join(
    request: &JoinRequest,
    app_key: &Key,
    join_nonce: u32,
    dev_addr: u32,
) -> Result<(JoinAccept, Session), MacError> {
    let accept = JoinAccept {
        join_nonce: join_nonce & 0x00ff_ffff,
        net_id: NET_ID,
        dev_addr,
    };
    let session = session_from_join(request, &accept, app_key)?;
    Ok((accept, session))
}

/// Device side: completes a join from the accept it received.
pub fn complete_join(
    request: &JoinRequest,
    accept_frame: &Frame,
    app_key: &Key,
) -> Result<Session, MacError> {
    if !verify_mic(accept_frame, app_key) {
        return Err(MacError::BadMic);
    }
    let accept = JoinAccept::from_frame(accept_frame)?;
    session_from_join(request, &accept, app_key)
}

fn session_from_join(
    request: &JoinRequest,
    accept: &JoinAccept,
    app_key: &Key,
) -> Result<Session, MacError> {
    let (nwk, app) = crypto::derive_session_keys(
        &AesCmac,
        app_key,
        accept.join_nonce,
        accept.net_id,
        request.dev_nonce,
    );
    if nwk == app || nwk == *app_key || app == *app_key {
        return Err(MacError::DegenerateKeys);
    }
    Ok(Session {
        dev_eui: request.dev_eui,
        dev_addr: accept.dev_addr,
        nwk_s_key: nwk,
        app_s_key: app,
        fcnt_up: 0,
        fcnt_down: 0,
        activation: Activation::Otaa,
        exhausted: false,
    })
}

/// Random device address inside the simulated network's prefix.
pub fn random_dev_addr(rng: &mut impl Rng) -> u32 {
    (NET_ID & 0x7f) << 25 | (rng.random::<u32>() & 0x01ff_ffff)
}

/// Both halves of an over-the-air join in one step: a fresh DevNonce and
/// DevAddr are drawn from `rng`, the server side derives the session and the
/// device side checks it reaches the same keys.
pub fn otaa_join(
    dev_eui: DevEui,
    app_key: &Key,
    join_nonce: u32,
    rng: &mut impl Rng,
) -> Result<Session, MacError> {
    let request = JoinRequest {
        dev_eui,
        dev_nonce: rng.random(),
    };
    let req_frame = request.to_frame(app_key);
    if !verify_mic(&req_frame, app_key) {
        return Err(MacError::BadMic);
    }
    let (accept, network_view) = accept_join(&request, app_key, join_nonce, random_dev_addr(rng))?;
    let device_view = complete_join(&request, &accept.to_frame(app_key), app_key)?;
    debug_assert_eq!(device_view, network_view);
    Ok(device_view)
}
