//! Pairwise Hamming distances across clients, revealed only to the server.
//!
//! For every cross-client pair of rows the two owners end up with additive
//! shares `R` and `T` in `Z_M` with `T - R = h`, and send them to the server.
//! The server never sees a code. Each client uploads its own intra-client
//! distances in the clear, since it already knows them.
//!
//! `M = 2^ceil(log2(L + 1))` rather than `L`, so that `h = L` is not
//! confused with `h = 0`.
//!
//! Two share-generation protocols are provided:
//!
//! * OT: per bit, the sender draws `r` and offers `(r + b, r + 1 - b)`; the
//!   receiver picks with its own bit and so obtains `r + (b xor b')`.
//! * PHE: the lower-indexed client `j` encrypts its bits once under its own
//!   Paillier key. For a code `x` of its own, client `k` evaluates
//!   `h = sum_{x_l = 0} y_l - sum_{x_l = 1} y_l + |x|` under encryption,
//!   adds a large random `r`, and returns the ciphertext to `j`, who decrypts
//!   `T = h + r`. Client `k` keeps `R = r`.

use std::sync::Arc;

use num_bigint::BigUint;
use num_traits::{CheckedSub, One, ToPrimitive, Zero};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{decode_u32s, encode_u32s, Bus, BusError, MessageKind, PartyId, Phase};
use crate::crypto::monty::MontyModulus;
use crate::crypto::ot::{channel, ObliviousTransferChannel, OtBackend, OtError};
use crate::crypto::paillier::{Ciphertext, KeyProfile, PaillierError, PaillierKeypair, PaillierPublicKey};
use crate::crypto::prime::random_below;
use crate::lsh::{BitCodeMatrix, LshError};
use crate::seed::derive_rng;

/// Slack, in bits, between the PHE blinding range and the ring modulus.
const PHE_BLINDING_SLACK_BITS: u64 = 64;

#[derive(Debug, Error)]
pub enum HammingError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Codes(#[from] LshError),
    #[error("codes have {found} bits but the run uses {expected}")]
    CodeLength { expected: usize, found: usize },
    #[error("key of {bits} bits is too small for code length {code_length}")]
    KeyTooSmall { bits: u64, code_length: usize },
    #[error("missing Paillier key for client {0}")]
    MissingKey(usize),
    #[error("decrypted value exceeds the blinding range")]
    Decryption,
    #[error("malformed share message: {0}")]
    Share(String),
}

impl HammingError {
    /// Dropout of `party`, if that is what this error reports.
    pub fn dropped_party(&self) -> Option<PartyId> {
        match self {
            HammingError::Bus(BusError::PartyDropped(p)) | HammingError::Ot(OtError::Bus(BusError::PartyDropped(p))) => {
                Some(*p)
            }
            _ => None,
        }
    }
}

/// Smallest power of two strictly greater than `code_length`.
pub fn ring_modulus(code_length: usize) -> u32 {
    assert!((1..(1 << 31)).contains(&code_length), "code length {code_length} out of range");
    (code_length as u32 + 1).next_power_of_two()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HammingProtocol {
    Ot,
    Phe,
    /// Clients send raw codes to the server. Insecure; for debugging.
    PlaintextDebug,
}

impl std::str::FromStr for HammingProtocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ot" => Ok(Self::Ot),
            "phe" => Ok(Self::Phe),
            "plaintext_debug" => Ok(Self::PlaintextDebug),
            other => Err(format!("unknown protocol {other:?} (expected ot, phe or plaintext_debug)")),
        }
    }
}

/// How pair blocks are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// One pair at a time in lexicographic `(j, k)` order.
    Deterministic,
    /// Every pair block on its own thread. Logs are merged in pair order,
    /// so the result must equal the deterministic schedule's.
    Threaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HammingSettings {
    pub protocol: HammingProtocol,
    pub ot_backend: OtBackend,
    pub key_profile: KeyProfile,
    pub schedule: Schedule,
}

impl Default for HammingSettings {
    fn default() -> Self {
        Self {
            protocol: HammingProtocol::Ot,
            ot_backend: OtBackend::DiffieHellman,
            key_profile: KeyProfile::Test512,
            schedule: Schedule::Deterministic,
        }
    }
}

/// A client that stops responding after finishing `after_pairs` of its
/// cross-client pair blocks (0 means it never takes part).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HammingDropout {
    pub client: usize,
    pub after_pairs: usize,
}

/// Per-client Paillier keys, indexed by cohort position.
#[derive(Debug, Clone)]
pub struct KeyRing {
    keys: Vec<Arc<PaillierKeypair>>,
}

impl KeyRing {
    pub fn generate(clients: usize, profile: KeyProfile, seed: u64) -> Result<Self, PaillierError> {
        let keys = (0..clients)
            .map(|j| {
                let mut rng = derive_rng(seed, "hamming/phe/keygen", &[j as u64]);
                PaillierKeypair::generate(profile.modulus_bits(), &mut rng).map(Arc::new)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { keys })
    }

    pub fn from_keys(keys: Vec<PaillierKeypair>) -> Self {
        Self { keys: keys.into_iter().map(Arc::new).collect() }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, client: usize) -> Option<&PaillierKeypair> {
        self.keys.get(client).map(|k| k.as_ref())
    }
}

/// Server-side Hamming matrix over all cohort rows.
///
/// Rows of clients that dropped out are marked absent and hold zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HammingMatrix {
    n: usize,
    code_length: usize,
    modulus: u32,
    values: Vec<u32>,
    present: Vec<bool>,
}

impl HammingMatrix {
    fn empty(n: usize, code_length: usize) -> Self {
        Self { n, code_length, modulus: ring_modulus(code_length), values: vec![0; n * n], present: vec![true; n] }
    }

    /// Dense matrix with every row present; checks the invariants.
    pub fn from_values(n: usize, code_length: usize, values: Vec<u32>) -> Result<Self, String> {
        if values.len() != n * n {
            return Err(format!("{} values for an {n} x {n} matrix", values.len()));
        }
        let m = Self { values, ..Self::empty(n, code_length) };
        m.validate()?;
        Ok(m)
    }

    /// Popcount-of-XOR reference over stacked codes.
    pub fn plaintext(codes: &[BitCodeMatrix]) -> Result<Self, HammingError> {
        let code_length = codes.first().map_or(1, BitCodeMatrix::code_length);
        let rows: Vec<(usize, usize)> =
            codes.iter().enumerate().flat_map(|(c, m)| (0..m.rows()).map(move |i| (c, i))).collect();
        let mut out = Self::empty(rows.len(), code_length);
        for m in codes {
            if m.code_length() != code_length {
                return Err(HammingError::CodeLength { expected: code_length, found: m.code_length() });
            }
        }
        for (a, &(ca, ia)) in rows.iter().enumerate() {
            for (b, &(cb, ib)) in rows.iter().enumerate().skip(a + 1) {
                let h = codes[ca].hamming(ia, &codes[cb], ib);
                out.set(a, b, h);
            }
        }
        Ok(out)
    }

    fn set(&mut self, i: usize, j: usize, h: u32) {
        self.values[i * self.n + j] = h;
        self.values[j * self.n + i] = h;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    pub fn modulus(&self) -> u32 {
        self.modulus
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn is_complete(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    /// Matrix over the present rows only, in their original order.
    pub fn restricted(&self) -> Self {
        let keep: Vec<usize> = (0..self.n).filter(|&i| self.present[i]).collect();
        let mut out = Self::empty(keep.len(), self.code_length);
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                out.values[a * keep.len() + b] = self.get(i, j);
            }
        }
        out
    }

    /// Symmetry, zero diagonal and range.
    pub fn validate(&self) -> Result<(), String> {
        for i in 0..self.n {
            if self.get(i, i) != 0 {
                return Err(format!("nonzero diagonal at {i}"));
            }
            for j in 0..self.n {
                let h = self.get(i, j);
                if h != self.get(j, i) {
                    return Err(format!("asymmetric at ({i}, {j})"));
                }
                if h as usize > self.code_length {
                    return Err(format!("distance {h} at ({i}, {j}) exceeds {}", self.code_length));
                }
            }
        }
        Ok(())
    }
}

fn row_ring_bits(codes: &BitCodeMatrix, i: usize) -> Vec<bool> {
    codes.row_bits(i)
}

/// OT-based shares for one block: sender holds `sender_codes` (rows `a`),
/// receiver holds `receiver_codes` (rows `b`). Returns `(R, T)`, both
/// row-major `a x b`, with `T - R = h (mod M)`.
#[allow(clippy::too_many_arguments)]
pub fn ot_hamming_block(
    bus: &Bus,
    round_id: u64,
    sender: PartyId,
    receiver: PartyId,
    sender_codes: &BitCodeMatrix,
    receiver_codes: &BitCodeMatrix,
    channel: &dyn ObliviousTransferChannel,
    sender_rng: &mut dyn RngCore,
    receiver_rng: &mut dyn RngCore,
) -> Result<(Vec<u32>, Vec<u32>), HammingError> {
    let l = sender_codes.code_length();
    if receiver_codes.code_length() != l {
        return Err(HammingError::CodeLength { expected: l, found: receiver_codes.code_length() });
    }
    let mask = ring_modulus(l) - 1;
    let (na, nb) = (sender_codes.rows(), receiver_codes.rows());

    // Sender side.
    let mut offers = Vec::with_capacity(na * nb * l);
    let mut shares_r = Vec::with_capacity(na * nb);
    for i in 0..na {
        let bits = row_ring_bits(sender_codes, i);
        for _ in 0..nb {
            let mut total = 0u32;
            for &b in &bits {
                let r = sender_rng.next_u32() & mask;
                total = total.wrapping_add(r);
                let b = u32::from(b);
                offers.push((r.wrapping_add(b) & mask, r.wrapping_add(1 - b) & mask));
            }
            shares_r.push(total & mask);
        }
    }

    // Receiver side.
    let mut choices = Vec::with_capacity(na * nb * l);
    for _ in 0..na {
        for k in 0..nb {
            choices.extend(row_ring_bits(receiver_codes, k));
        }
    }

    let received = channel.transfer(bus, round_id, sender, receiver, &offers, &choices, sender_rng, receiver_rng)?;
    let shares_t = received.chunks(l).map(|c| c.iter().fold(0u32, |acc, &t| acc.wrapping_add(t)) & mask).collect();
    Ok((shares_r, shares_t))
}

/// Single-pair convenience wrapper over [`ot_hamming_block`] on a private bus.
pub fn ot_hamming_pair(
    sender_code: &[bool],
    receiver_code: &[bool],
    backend: OtBackend,
    rng_seed: u64,
) -> Result<(u32, u32), HammingError> {
    let a = BitCodeMatrix::from_bits(&[sender_code.to_vec()])?;
    let b = BitCodeMatrix::from_bits(&[receiver_code.to_vec()])?;
    let bus = Bus::new();
    let mut srng = derive_rng(rng_seed, "hamming/ot/sender", &[]);
    let mut rrng = derive_rng(rng_seed, "hamming/ot/receiver", &[]);
    let (r, t) = ot_hamming_block(
        &bus,
        0,
        PartyId::Client(0),
        PartyId::Client(1),
        &a,
        &b,
        channel(backend),
        &mut srng,
        &mut rrng,
    )?;
    Ok((r[0], t[0]))
}

/// Upper bound for the evaluator's blinding value `r`: the largest multiple
/// of `M` with `bound + L < N`, so `h + r` never wraps and `r mod M` is
/// uniform.
fn blinding_bound(pk: &PaillierPublicKey, code_length: usize) -> Result<BigUint, HammingError> {
    let m = BigUint::from(ring_modulus(code_length));
    let n = pk.n();
    let too_small = HammingError::KeyTooSmall { bits: n.bits(), code_length };
    let room = n.checked_sub(&BigUint::from(code_length as u64 + 1)).ok_or(too_small)?;
    let bound = (&room / &m) * &m;
    if bound.bits() < m.bits() + PHE_BLINDING_SLACK_BITS {
        return Err(HammingError::KeyTooSmall { bits: n.bits(), code_length });
    }
    Ok(bound)
}

/// Encrypts every bit of every row, row-major.
pub fn encrypt_codes(
    pk: &PaillierPublicKey,
    codes: &BitCodeMatrix,
    rng: &mut dyn RngCore,
) -> Vec<Ciphertext> {
    let mut out = Vec::with_capacity(codes.rows() * codes.code_length());
    for i in 0..codes.rows() {
        for b in codes.row_bits(i) {
            out.push(pk.encrypt_u64(u64::from(b), rng));
        }
    }
    out
}

/// Inverts every element modulo `modulus` with one modular inversion.
fn batch_invert(values: &[BigUint], modulus: &BigUint) -> Result<Vec<BigUint>, HammingError> {
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let mut prefix = Vec::with_capacity(values.len());
    let mut acc = BigUint::one();
    for v in values {
        acc = (acc * v) % modulus;
        prefix.push(acc.clone());
    }
    let mut inv = acc.modinv(modulus).ok_or(PaillierError::InvalidCiphertext)?;
    let mut out = vec![BigUint::zero(); values.len()];
    for i in (0..values.len()).rev() {
        out[i] = if i == 0 { inv.clone() } else { (&inv * &prefix[i - 1]) % modulus };
        inv = (inv * &values[i]) % modulus;
    }
    Ok(out)
}

/// Evaluator side of the PHE protocol: for each `(holder row, own row)`
/// returns `Enc(h + r)` and keeps `R = r mod M`.
fn phe_evaluate(
    pk: &PaillierPublicKey,
    encrypted: &[Ciphertext],
    holder_rows: usize,
    own: &BitCodeMatrix,
    rng: &mut dyn RngCore,
) -> Result<(Vec<Ciphertext>, Vec<u32>), HammingError> {
    let l = own.code_length();
    let n2 = pk.n_squared();
    let bound = blinding_bound(pk, l)?;
    let m = ring_modulus(l);
    if encrypted.len() != holder_rows * l {
        return Err(HammingError::Share(format!("{} ciphertexts for {holder_rows} rows of {l} bits", encrypted.len())));
    }

    let modulus = MontyModulus::new(n2);
    let own_bits: Vec<Vec<bool>> = (0..own.rows()).map(|k| own.row_bits(k)).collect();
    let weights: Vec<usize> = own_bits.iter().map(|b| b.iter().filter(|&&x| x).count()).collect();
    let light: Vec<bool> = weights.iter().map(|&w| 2 * w <= l).collect();
    let picks: Vec<Vec<usize>> =
        own_bits.iter().zip(&light).map(|(bits, &is_light)| (0..l).filter(|&t| bits[t] == is_light).collect()).collect();

    // Light rows need S1^-1 with S1 = prod_{x=1} c; heavy rows need Ytot^-1
    // and use S0 = prod_{x=0} c: both cost at most L/2 multiplications.
    // Totals are Enc(|y|), the product of all of a holder row's ciphertexts.
    let mut totals = Vec::with_capacity(holder_rows);
    let mut partial = Vec::with_capacity(holder_rows * own.rows());
    for row in encrypted.chunks(l) {
        let loaded = modulus.load(row.iter().map(Ciphertext::value));
        totals.push(modulus.product(&loaded, 0..l));
        for pick in &picks {
            partial.push(modulus.product(&loaded, pick.iter().copied()));
        }
    }
    let light_indices: Vec<usize> = (0..partial.len()).filter(|&p| light[p % own.rows()]).collect();
    let light_inverses = batch_invert(&light_indices.iter().map(|&p| partial[p].clone()).collect::<Vec<_>>(), n2)?;
    let any_heavy = light.iter().any(|&x| !x);
    let total_inverses = if any_heavy { batch_invert(&totals, n2)? } else { Vec::new() };

    let mut light_iter = light_inverses.into_iter();
    let mut out = Vec::with_capacity(partial.len());
    let mut shares = Vec::with_capacity(partial.len());
    for (p, s) in partial.into_iter().enumerate() {
        let (i, k) = (p / own.rows(), p % own.rows());
        let difference = if light[k] {
            // Ytot * S1^-2
            let inv = light_iter.next().expect("one inverse per light entry");
            (((&totals[i] * &inv) % n2) * &inv) % n2
        } else {
            // S0^2 * Ytot^-1
            (((&s * &s) % n2) * &total_inverses[i]) % n2
        };
        let r = random_below(&bound, rng);
        shares.push((&r % m).to_u32().expect("reduced below M"));
        let blind = pk.encrypt(&(r + weights[k]), rng)?;
        out.push(Ciphertext::from_value((difference * blind.value()) % n2));
    }
    Ok((out, shares))
}

/// PHE-based shares for one block. `encrypted` is the holder's cached
/// encryption of its own codes; only the holder can decrypt. Returns
/// `(R, T)` row-major `holder rows x evaluator rows`.
#[allow(clippy::too_many_arguments)]
pub fn phe_hamming_exchange(
    bus: &Bus,
    round_id: u64,
    holder: PartyId,
    evaluator: PartyId,
    holder_keys: &PaillierKeypair,
    encrypted: &[Ciphertext],
    evaluator_pk: &PaillierPublicKey,
    evaluator_codes: &BitCodeMatrix,
    holder_rows: usize,
    evaluator_rng: &mut dyn RngCore,
) -> Result<(Vec<u32>, Vec<u32>), HammingError> {
    let l = evaluator_codes.code_length();
    let mask = ring_modulus(l) - 1;

    let payload = holder_keys.public.encode_ciphertexts(encrypted);
    let msg = bus.send(round_id, holder, evaluator, MessageKind::PheCode, payload, encrypted.len() as u64)?;

    let received = evaluator_pk.decode_ciphertexts(&msg)?;
    let (evaluated, shares_r) = phe_evaluate(evaluator_pk, &received, holder_rows, evaluator_codes, evaluator_rng)?;
    let payload = evaluator_pk.encode_ciphertexts(&evaluated);
    let msg = bus.send(round_id, evaluator, holder, MessageKind::PheEvaluated, payload, evaluated.len() as u64)?;

    let received = holder_keys.public.decode_ciphertexts(&msg)?;
    let bound = blinding_bound(&holder_keys.public, l)? + BigUint::from(l as u64);
    let mut shares_t = Vec::with_capacity(received.len());
    for c in &received {
        let t = holder_keys.secret.decrypt(c)?;
        if t > bound {
            return Err(HammingError::Decryption);
        }
        let low = t.to_u64_digits().first().copied().unwrap_or(0);
        shares_t.push(low as u32 & mask);
    }
    Ok((shares_r, shares_t))
}

/// Shares for one holder code against a sequence of other codes under the
/// holder's `keys`, on a private bus.
pub fn phe_hamming_block(
    holder_code: &[bool],
    other_codes: &[Vec<bool>],
    keys: &PaillierKeypair,
    rng_seed: u64,
) -> Result<Vec<(u32, u32)>, HammingError> {
    let holder = BitCodeMatrix::from_bits(&[holder_code.to_vec()])?;
    let others = BitCodeMatrix::from_bits(other_codes)?;
    let bus = Bus::new();
    let mut hrng = derive_rng(rng_seed, "hamming/phe/encrypt", &[]);
    let mut erng = derive_rng(rng_seed, "hamming/phe/evaluate", &[]);
    let encrypted = encrypt_codes(&keys.public, &holder, &mut hrng);
    let (r, t) = phe_hamming_exchange(
        &bus,
        0,
        PartyId::Client(0),
        PartyId::Client(1),
        keys,
        &encrypted,
        &keys.public,
        &others,
        1,
        &mut erng,
    )?;
    Ok(r.into_iter().zip(t).collect())
}

/// Distances of one client's rows among themselves, upper triangle row-major.
pub fn intra_block(codes: &BitCodeMatrix) -> Vec<u32> {
    let n = codes.rows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for k in i + 1..n {
            out.push(codes.hamming(i, codes, k));
        }
    }
    out
}

struct PairJob {
    j: usize,
    k: usize,
    dropped: Vec<usize>,
}

struct PairResult {
    j: usize,
    k: usize,
    outcome: Result<Vec<u32>, HammingError>,
}

struct Context<'a> {
    codes: &'a [BitCodeMatrix],
    settings: &'a HammingSettings,
    keys: Option<&'a KeyRing>,
    encrypted: &'a [Option<Vec<Ciphertext>>],
    received_keys: &'a [Vec<Option<PaillierPublicKey>>],
    seed: u64,
    round_id: u64,
}

fn client(j: usize) -> PartyId {
    PartyId::Client(j as u32)
}

fn run_pair(ctx: &Context<'_>, job: &PairJob, bus: &Bus) -> Result<Vec<u32>, HammingError> {
    let (j, k) = (job.j, job.k);
    for &d in &job.dropped {
        bus.drop_party(client(d));
    }
    let (cj, ck) = (&ctx.codes[j], &ctx.codes[k]);
    let parts = [j as u64, k as u64];
    let (shares_j, shares_k) = match ctx.settings.protocol {
        HammingProtocol::Ot => {
            let mut srng = derive_rng(ctx.seed, "hamming/ot/sender", &parts);
            let mut rrng = derive_rng(ctx.seed, "hamming/ot/receiver", &parts);
            ot_hamming_block(
                bus,
                ctx.round_id,
                client(j),
                client(k),
                cj,
                ck,
                channel(ctx.settings.ot_backend),
                &mut srng,
                &mut rrng,
            )?
        }
        HammingProtocol::Phe => {
            let keys = ctx.keys.and_then(|r| r.get(j)).ok_or(HammingError::MissingKey(j))?;
            // Setup material is absent when a party left before sending it.
            let absent = || match [j, k].into_iter().find(|&c| bus.is_dropped(client(c))) {
                Some(c) => HammingError::Bus(BusError::PartyDropped(client(c))),
                None => HammingError::MissingKey(j),
            };
            let encrypted = ctx.encrypted[j].as_ref().ok_or_else(absent)?;
            let pk = ctx.received_keys[k][j].as_ref().ok_or_else(absent)?;
            let mut erng = derive_rng(ctx.seed, "hamming/phe/evaluate", &parts);
            let (r, t) =
                phe_hamming_exchange(bus, ctx.round_id, client(j), client(k), keys, encrypted, pk, ck, cj.rows(), &mut erng)?;
            (t, r)
        }
        HammingProtocol::PlaintextDebug => unreachable!("debug protocol has no pair blocks"),
    };
    // Both owners upload their shares; the server takes the difference.
    let count = shares_j.len() as u64;
    let from_j = bus.send(ctx.round_id, client(j), PartyId::Server, MessageKind::HammingShare, encode_u32s(&shares_j), count)?;
    let from_k = bus.send(ctx.round_id, client(k), PartyId::Server, MessageKind::HammingShare, encode_u32s(&shares_k), count)?;
    let (a, b) = (decode_u32s(&from_j)?, decode_u32s(&from_k)?);
    if a.len() != b.len() || a.len() != cj.rows() * ck.rows() {
        return Err(HammingError::Share(format!("pair ({j}, {k}) shares have lengths {} and {}", a.len(), b.len())));
    }
    let mask = ring_modulus(cj.code_length()) - 1;
    let distances = match ctx.settings.protocol {
        // j sent R, k sent T
        HammingProtocol::Ot => a.iter().zip(&b).map(|(&r, &t)| t.wrapping_sub(r) & mask).collect(),
        // j decrypted T, k kept R
        _ => a.iter().zip(&b).map(|(&t, &r)| t.wrapping_sub(r) & mask).collect(),
    };
    Ok(distances)
}

/// Runs the full Hamming phase and returns the server's matrix.
///
/// Clients are identified by cohort position. A dropped client's rows are
/// marked absent, and blocks it already finished are discarded.
pub fn compute_hamming_matrix(
    codes: &[BitCodeMatrix],
    settings: &HammingSettings,
    keys: Option<&KeyRing>,
    bus: &Bus,
    seed: u64,
    round_id: u64,
    dropouts: &[HammingDropout],
) -> Result<HammingMatrix, HammingError> {
    let code_length = codes.first().map_or(1, BitCodeMatrix::code_length);
    for c in codes {
        if c.code_length() != code_length {
            return Err(HammingError::CodeLength { expected: code_length, found: c.code_length() });
        }
    }
    let m = codes.len();
    let offsets: Vec<usize> = std::iter::once(0)
        .chain(codes.iter().scan(0, |acc, c| {
            *acc += c.rows();
            Some(*acc)
        }))
        .collect();
    let mut out = HammingMatrix::empty(offsets[m], code_length);

    let quota = |client: usize| dropouts.iter().filter(|d| d.client == client).map(|d| d.after_pairs).min();
    let gone_from_start: Vec<usize> = (0..m).filter(|&c| quota(c) == Some(0)).collect();
    let mut failed = vec![false; m];
    for &c in &gone_from_start {
        bus.drop_party(client(c));
        failed[c] = true;
    }

    bus.set_phase(Phase::Hamming);
    if settings.protocol == HammingProtocol::PlaintextDebug {
        let mut received = Vec::with_capacity(m);
        for (j, c) in codes.iter().enumerate() {
            let msg = if quota(j).is_some() {
                bus.drop_party(client(j));
                None
            } else {
                Some(bus.send(round_id, client(j), PartyId::Server, MessageKind::PlainCodes, c.to_bytes(), c.rows() as u64)?)
            };
            received.push(msg.map(|b| BitCodeMatrix::from_bytes(&b)).transpose()?);
        }
        for j in 0..m {
            let Some(a) = &received[j] else { continue };
            for k in j..m {
                let Some(b) = &received[k] else { continue };
                for i in 0..a.rows() {
                    for r in 0..b.rows() {
                        out.set(offsets[j] + i, offsets[k] + r, a.hamming(i, b, r));
                    }
                }
            }
        }
        for (j, r) in received.iter().enumerate() {
            if r.is_none() {
                out.present[offsets[j]..offsets[j + 1]].fill(false);
            }
        }
        clear_absent(&mut out);
        return Ok(out);
    }

    // Setup: PHE encryptors publish keys and encrypt their codes once.
    let mut received_keys: Vec<Vec<Option<PaillierPublicKey>>> = vec![vec![None; m]; m];
    let mut encrypted: Vec<Option<Vec<Ciphertext>>> = vec![None; m];
    if settings.protocol == HammingProtocol::Phe {
        let ring = keys.ok_or(HammingError::MissingKey(0))?;
        bus.set_phase(Phase::Setup);
        for j in 0..m.saturating_sub(1) {
            let kp = ring.get(j).ok_or(HammingError::MissingKey(j))?;
            blinding_bound(&kp.public, code_length)?;
            for (k, slot) in received_keys.iter_mut().enumerate().skip(j + 1) {
                match bus.send(round_id, client(j), client(k), MessageKind::PublicKey, kp.public.to_bytes(), 1) {
                    Ok(bytes) => slot[j] = Some(PaillierPublicKey::from_bytes(&bytes)?),
                    Err(BusError::PartyDropped(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            if !failed[j] {
                let mut rng = derive_rng(seed, "hamming/phe/encrypt", &[j as u64]);
                encrypted[j] = Some(encrypt_codes(&kp.public, &codes[j], &mut rng));
            }
        }
        bus.set_phase(Phase::Hamming);
    }

    // Lexicographic pairs; a pair runs with a party dropped once that
    // party has used up its quota of completed pairs.
    let mut done = vec![0usize; m];
    let mut jobs = Vec::new();
    for j in 0..m {
        for k in j + 1..m {
            let mut dropped = Vec::new();
            for c in [j, k] {
                if quota(c).is_some_and(|q| done[c] >= q) {
                    dropped.push(c);
                }
            }
            if dropped.is_empty() {
                done[j] += 1;
                done[k] += 1;
            }
            jobs.push(PairJob { j, k, dropped });
        }
    }

    let ctx = Context {
        codes,
        settings,
        keys,
        encrypted: &encrypted,
        received_keys: &received_keys,
        seed,
        round_id,
    };
    let results: Vec<(PairResult, Bus)> = match settings.schedule {
        Schedule::Deterministic => jobs
            .iter()
            .map(|job| {
                let child = bus.fork();
                let outcome = run_pair(&ctx, job, &child);
                (PairResult { j: job.j, k: job.k, outcome }, child)
            })
            .collect(),
        Schedule::Threaded => std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|job| {
                    let child = bus.fork();
                    let ctx = &ctx;
                    scope.spawn(move || {
                        let outcome = run_pair(ctx, job, &child);
                        (PairResult { j: job.j, k: job.k, outcome }, child)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("pair thread panicked")).collect()
        }),
    };

    for (result, child) in results {
        bus.join(child);
        match result.outcome {
            Ok(distances) => {
                let (j, k) = (result.j, result.k);
                let nk = codes[k].rows();
                for (p, &h) in distances.iter().enumerate() {
                    out.set(offsets[j] + p / nk, offsets[k] + p % nk, h);
                }
            }
            Err(e) => match e.dropped_party() {
                Some(PartyId::Client(c)) => failed[c as usize] = true,
                _ => return Err(e),
            },
        }
    }

    // Remaining clients drop out now if they were scheduled to.
    for c in 0..m {
        if quota(c).is_some() && !failed[c] {
            bus.drop_party(client(c));
            failed[c] = true;
        }
    }

    for (j, c) in codes.iter().enumerate() {
        if failed[j] {
            continue;
        }
        let block = intra_block(c);
        let msg = bus.send(round_id, client(j), PartyId::Server, MessageKind::IntraBlock, encode_u32s(&block), block.len() as u64)?;
        let block = decode_u32s(&msg)?;
        let mut it = block.into_iter();
        for i in 0..c.rows() {
            for k in i + 1..c.rows() {
                let h = it.next().ok_or_else(|| HammingError::Share("short intra block".into()))?;
                out.set(offsets[j] + i, offsets[j] + k, h);
            }
        }
    }

    for (j, &f) in failed.iter().enumerate() {
        if f {
            out.present[offsets[j]..offsets[j + 1]].fill(false);
        }
    }
    clear_absent(&mut out);
    Ok(out)
}

fn clear_absent(out: &mut HammingMatrix) {
    for i in 0..out.n {
        if !out.present[i] {
            for j in 0..out.n {
                out.set(i, j, 0);
            }
        }
    }
}

/// Random bit rows, for tests and fixtures.
pub fn random_codes<R: Rng>(rows: usize, code_length: usize, rng: &mut R) -> BitCodeMatrix {
    let bits: Vec<Vec<bool>> = (0..rows).map(|_| (0..code_length).map(|_| rng.random()).collect()).collect();
    BitCodeMatrix::from_bits(&bits).expect("non-empty rows")
}
