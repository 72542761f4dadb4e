//! 1-out-of-2 oblivious transfer of 32-bit ring values.
//!
//! [`DhOt`] is the Chou-Orlandi "simplest OT" over the Ristretto group:
//!
//! 1. sender draws `a`, sends `A = aG`
//! 2. receiver with choice `c` draws `b`, sends `B = bG + cA`
//! 3. sender sends `e0 = z0 ^ H(aB)` and `e1 = z1 ^ H(aB - aA)`
//! 4. receiver decrypts `e_c` with `H(bA)`
//!
//! Points are hashed in compressed form.
//!
//! [`SimulatedOt`] is an in-process trusted exchange: nothing but the chosen
//! value crosses the wire, which is what the receiver would learn anyway.

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoBasepointTable, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bus::{decode_u32s, encode_u32s, Bus, BusError, MessageKind, PartyId};

const POINT_BYTES: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OtError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("invalid group element in OT message")]
    InvalidPoint,
    #[error("OT message carries {actual} items, expected {expected}")]
    Length { expected: usize, actual: usize },
}

/// Which OT implementation a protocol run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtBackend {
    DiffieHellman,
    Simulated,
}

/// Batch 1-out-of-2 transfer: the receiver ends with `offers[i][choices[i]]`.
///
/// Sender and receiver state stay inside the implementation; every value
/// that crosses between them goes through `bus`.
pub trait ObliviousTransferChannel {
    #[allow(clippy::too_many_arguments)]
    fn transfer(
        &self,
        bus: &Bus,
        round_id: u64,
        sender: PartyId,
        receiver: PartyId,
        offers: &[(u32, u32)],
        choices: &[bool],
        sender_rng: &mut dyn RngCore,
        receiver_rng: &mut dyn RngCore,
    ) -> Result<Vec<u32>, OtError>;
}

pub fn channel(backend: OtBackend) -> &'static dyn ObliviousTransferChannel {
    match backend {
        OtBackend::DiffieHellman => &DhOt,
        OtBackend::Simulated => &SimulatedOt,
    }
}

fn random_scalar(rng: &mut dyn RngCore) -> Scalar {
    let mut wide = [0u8; 64];
    rng.fill_bytes(&mut wide);
    Scalar::from_bytes_mod_order_wide(&wide)
}

fn pad(a: &CompressedRistretto, b: &CompressedRistretto, key: &CompressedRistretto, index: u64) -> u32 {
    let mut h = Sha256::new();
    h.update(b"xclp/ot/v1");
    h.update(a.as_bytes());
    h.update(b.as_bytes());
    h.update(key.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u32::from_le_bytes(d[..4].try_into().expect("4 bytes"))
}

fn decode_points(bytes: &[u8], expected: usize) -> Result<Vec<CompressedRistretto>, OtError> {
    if bytes.len() != expected * POINT_BYTES {
        return Err(OtError::Length { expected, actual: bytes.len() / POINT_BYTES });
    }
    bytes
        .chunks_exact(POINT_BYTES)
        .map(|c| CompressedRistretto::from_slice(c).map_err(|_| OtError::InvalidPoint))
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DhOt;

// Points are built at half scale so that `double_and_compress_batch`
// yields the compressed full-scale points in one batched pass.

struct DhSender {
    a_half: Scalar,
    a_point: RistrettoPoint,
    a_compressed: CompressedRistretto,
}

impl DhSender {
    fn new(rng: &mut dyn RngCore) -> Self {
        let a = random_scalar(rng);
        let a_point = RISTRETTO_BASEPOINT_TABLE * &a;
        Self { a_half: a * Scalar::from(2u8).invert(), a_compressed: a_point.compress(), a_point }
    }

    fn offers(&self, choice_points: &[CompressedRistretto], offers: &[(u32, u32)]) -> Result<Vec<u32>, OtError> {
        let half_aa = self.a_point * self.a_half;
        let mut halves = Vec::with_capacity(2 * offers.len());
        for b in choice_points {
            let point = b.decompress().ok_or(OtError::InvalidPoint)?;
            let k0 = point * self.a_half;
            halves.push(k0);
            halves.push(k0 - half_aa);
        }
        let keys = RistrettoPoint::double_and_compress_batch(&halves);
        let mut out = Vec::with_capacity(2 * offers.len());
        for (i, ((b, &(z0, z1)), k)) in choice_points.iter().zip(offers).zip(keys.chunks_exact(2)).enumerate() {
            out.push(z0 ^ pad(&self.a_compressed, b, &k[0], i as u64));
            out.push(z1 ^ pad(&self.a_compressed, b, &k[1], i as u64));
        }
        Ok(out)
    }
}

impl ObliviousTransferChannel for DhOt {
    fn transfer(
        &self,
        bus: &Bus,
        round_id: u64,
        sender: PartyId,
        receiver: PartyId,
        offers: &[(u32, u32)],
        choices: &[bool],
        sender_rng: &mut dyn RngCore,
        receiver_rng: &mut dyn RngCore,
    ) -> Result<Vec<u32>, OtError> {
        let count = choices.len();
        if offers.len() != count {
            return Err(OtError::Length { expected: count, actual: offers.len() });
        }

        // sender -> receiver: A
        let s = DhSender::new(sender_rng);
        let msg = bus.send(round_id, sender, receiver, MessageKind::OtSetup, s.a_compressed.as_bytes().to_vec(), 1)?;

        // receiver -> sender: B_i
        let a_compressed = decode_points(&msg, 1)?[0];
        let a_point = a_compressed.decompress().ok_or(OtError::InvalidPoint)?;
        let a_table = RistrettoBasepointTable::create(&a_point);
        // B = 2(b'G + c A/2) with b = 2b'
        let half_a = a_point * Scalar::from(2u8).invert();
        let mut secrets = Vec::with_capacity(count);
        let mut halves = Vec::with_capacity(count);
        for &c in choices {
            let b = random_scalar(receiver_rng);
            let mut point = RISTRETTO_BASEPOINT_TABLE * &b;
            if c {
                point += half_a;
            }
            halves.push(point);
            secrets.push(b);
        }
        let choice_points = RistrettoPoint::double_and_compress_batch(&halves);
        let choice_bytes: Vec<u8> = choice_points.iter().flat_map(|p| *p.as_bytes()).collect();
        let msg = bus.send(round_id, receiver, sender, MessageKind::OtChoice, choice_bytes, count as u64)?;

        // sender -> receiver: masked offers
        let received = decode_points(&msg, count)?;
        let masked = s.offers(&received, offers)?;
        let msg = bus.send(round_id, sender, receiver, MessageKind::OtOffer, encode_u32s(&masked), count as u64)?;

        let masked = decode_u32s(&msg)?;
        if masked.len() != 2 * count {
            return Err(OtError::Length { expected: 2 * count, actual: masked.len() });
        }
        // bA = 2(b'A)
        let half_keys: Vec<RistrettoPoint> = secrets.iter().map(|b| &a_table * b).collect();
        let keys = RistrettoPoint::double_and_compress_batch(&half_keys);
        let mut out = Vec::with_capacity(count);
        for (i, ((key, &c), point)) in keys.iter().zip(choices).zip(&choice_points).enumerate() {
            let e = masked[2 * i + usize::from(c)];
            out.push(e ^ pad(&a_compressed, point, key, i as u64));
        }
        debug_assert_eq!(s.a_point.compress(), a_compressed);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimulatedOt;

impl ObliviousTransferChannel for SimulatedOt {
    fn transfer(
        &self,
        bus: &Bus,
        round_id: u64,
        sender: PartyId,
        receiver: PartyId,
        offers: &[(u32, u32)],
        choices: &[bool],
        _sender_rng: &mut dyn RngCore,
        _receiver_rng: &mut dyn RngCore,
    ) -> Result<Vec<u32>, OtError> {
        if offers.len() != choices.len() {
            return Err(OtError::Length { expected: choices.len(), actual: offers.len() });
        }
        let chosen: Vec<u32> = offers.iter().zip(choices).map(|(&(z0, z1), &c)| if c { z1 } else { z0 }).collect();
        let msg = bus.send(round_id, sender, receiver, MessageKind::OtOffer, encode_u32s(&chosen), chosen.len() as u64)?;
        Ok(decode_u32s(&msg)?)
    }
}
