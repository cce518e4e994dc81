//! Keyed primitive behind MICs, payload encryption and session key derivation.
//!
//! The default [`AesCmac`] follows the LoRaWAN 1.0 construction (AES-128 CMAC
//! over a B0 block for MICs, AES-128 keystream blocks for FRMPayload). Any
//! other [`KeyedPrimitive`] may be substituted; the rest of the MAC only relies
//! on the tag being key- and bit-sensitive.

use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use cmac::{Cmac, Mac};

pub type Key = [u8; 16];

pub trait KeyedPrimitive {
    /// 128-bit keyed tag over arbitrary data.
    fn tag(&self, key: &Key, data: &[u8]) -> [u8; 16];
    /// Keyed permutation of one block.
    fn block(&self, key: &Key, block: [u8; 16]) -> [u8; 16];
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AesCmac;

impl KeyedPrimitive for AesCmac {
    fn tag(&self, key: &Key, data: &[u8]) -> [u8; 16] {
        let mut mac = <Cmac<Aes128> as Mac>::new_from_slice(key).expect("16-byte key");
        mac.update(data);
        mac.finalize().into_bytes().into()
    }

    fn block(&self, key: &Key, block: [u8; 16]) -> [u8; 16] {
        let cipher = Aes128::new(key.into());
        let mut b = block.into();
        cipher.encrypt_block(&mut b);
        b.into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up = 0,
    Down = 1,
}

fn counter_block(first: u8, dir: Direction, dev_addr: u32, fcnt: u32, last: u8) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[0] = first;
    b[5] = dir as u8;
    b[6..10].copy_from_slice(&dev_addr.to_le_bytes());
    b[10..14].copy_from_slice(&fcnt.to_le_bytes());
    b[15] = last;
    b
}

/// Four-byte MIC over `msg` for a data frame.
pub fn data_mic(
    prim: &impl KeyedPrimitive,
    key: &Key,
    dir: Direction,
    dev_addr: u32,
    fcnt: u32,
    msg: &[u8],
) -> [u8; 4] {
    let mut data = counter_block(0x49, dir, dev_addr, fcnt, msg.len() as u8).to_vec();
    data.extend_from_slice(msg);
    let t = prim.tag(key, &data);
    [t[0], t[1], t[2], t[3]]
}

/// Four-byte MIC for join frames, keyed with the root key.
pub fn join_mic(prim: &impl KeyedPrimitive, key: &Key, msg: &[u8]) -> [u8; 4] {
    let t = prim.tag(key, msg);
    [t[0], t[1], t[2], t[3]]
}

/// Symmetric payload transform (encrypts and decrypts).
pub fn crypt_payload(
    prim: &impl KeyedPrimitive,
    key: &Key,
    dir: Direction,
    dev_addr: u32,
    fcnt: u32,
    data: &[u8],
) -> Vec<u8> {
    data.chunks(16)
        .enumerate()
        .flat_map(|(i, chunk)| {
            let s = prim.block(key, counter_block(0x01, dir, dev_addr, fcnt, i as u8 + 1));
            chunk.iter().zip(s).map(|(d, k)| d ^ k).collect::<Vec<_>>()
        })
        .collect()
}

/// `(NwkSKey, AppSKey)` from the root key and the join nonces.
pub fn derive_session_keys(
    prim: &impl KeyedPrimitive,
    app_key: &Key,
    join_nonce: u32,
    net_id: u32,
    dev_nonce: u16,
) -> (Key, Key) {
    let block = |kind: u8| {
        let mut b = [0u8; 16];
        b[0] = kind;
        b[1..4].copy_from_slice(&join_nonce.to_le_bytes()[..3]);
        b[4..7].copy_from_slice(&net_id.to_le_bytes()[..3]);
        b[7..9].copy_from_slice(&dev_nonce.to_le_bytes());
        prim.block(app_key, b)
    };
    (block(0x01), block(0x02))
}
