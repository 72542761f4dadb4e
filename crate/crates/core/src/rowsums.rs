//! Masked summation where each client learns only its own rows of the total.
//!
//! Client `j` encodes its `n x C` contribution, adds a mask `M^(j)` with
//! `sum_j M^(j) = 0`, zeroes the rows it owns and uploads the result. The
//! server adds all uploads and relays rows `R_j` back to client `j` only.
//! Client `j` then adds back its own masked rows: every other client's mask
//! cancels against its own, so the sum is exact in the ring.
//!
//! Masks are pairwise: for each pair `a < b` of participants a PRG keyed by
//! their shared secret expands a matrix that `a` adds and `b` subtracts.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bus::{decode_u64s, encode_u64s, Bus, BusError, MessageKind, PartyId};
use crate::fixed_point::{FixedPointCodec, FixedPointError};
use crate::seed::derive_key;

#[derive(Debug, Error, PartialEq)]
pub enum RowSumsError {
    #[error("no shared secret for clients {0} and {1}")]
    MissingSecret(u32, u32),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error("contribution of client {client} has shape {rows}x{cols}, expected {n}x{c}")]
    Shape { client: u32, rows: usize, cols: usize, n: usize, c: usize },
    #[error("entry {value} of client {client} exceeds the overflow bound {bound}")]
    Overflow { client: u32, value: f64, bound: f64 },
    #[error("row partition does not cover 0..{0} exactly once")]
    Partition(usize),
    #[error("{0} dropped out before aggregation")]
    Dropout(PartyId),
    #[error("every participant dropped out")]
    NoParticipants,
    #[error("malformed share: {0}")]
    Share(String),
}

/// Pairwise shared secrets, keyed by `(min id, max id)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairwiseSecrets {
    secrets: BTreeMap<(u32, u32), [u8; 32]>,
}

impl PairwiseSecrets {
    /// Secrets for every pair of `participants`, derived from `root`. Stands in
    /// for a key exchange done out of band.
    pub fn derive(participants: &[u32], root: u64) -> Self {
        let mut secrets = BTreeMap::new();
        for (x, &a) in participants.iter().enumerate() {
            for &b in &participants[x + 1..] {
                let key = (a.min(b), a.max(b));
                secrets.insert(key, derive_key(root, "rowsums/pair", &[u64::from(key.0), u64::from(key.1)]));
            }
        }
        Self { secrets }
    }

    pub fn insert(&mut self, a: u32, b: u32, secret: [u8; 32]) {
        self.secrets.insert((a.min(b), a.max(b)), secret);
    }

    pub fn get(&self, a: u32, b: u32) -> Option<&[u8; 32]> {
        self.secrets.get(&(a.min(b), a.max(b)))
    }
}

fn pair_stream(secret: &[u8; 32], round_id: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"xclp/rowsums/mask/v1");
    h.update(secret);
    h.update(round_id.to_le_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Per-participant masks, row-major `n x C`, summing to zero in the ring.
pub fn derive_pairwise_masks(
    participants: &[u32],
    shape: (usize, usize),
    secrets: &PairwiseSecrets,
    round_id: u64,
) -> Result<Vec<Vec<u64>>, RowSumsError> {
    participants.iter().map(|&me| mask_for(me, participants, shape, secrets, round_id)).collect()
}

/// The mask one participant computes locally from its own secrets.
pub fn mask_for(
    me: u32,
    participants: &[u32],
    shape: (usize, usize),
    secrets: &PairwiseSecrets,
    round_id: u64,
) -> Result<Vec<u64>, RowSumsError> {
    let len = shape.0 * shape.1;
    let mut mask = vec![0u64; len];
    for &other in participants {
        if other == me {
            continue;
        }
        let secret = secrets.get(me, other).ok_or(RowSumsError::MissingSecret(me.min(other), me.max(other)))?;
        let mut prg = pair_stream(secret, round_id);
        let add = me < other;
        for m in mask.iter_mut() {
            let v = prg.next_u64();
            *m = if add { m.wrapping_add(v) } else { m.wrapping_sub(v) };
        }
    }
    Ok(mask)
}

/// A client's upload: masked encoding with its own rows zeroed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedShare {
    pub owner: u32,
    pub cols: usize,
    /// Row-major `n x C` ring elements.
    pub values: Vec<u64>,
    pub zeroed_rows: Vec<usize>,
}

/// Client side: returns the upload and the masked encoding `Z~` it keeps.
pub fn mask_contribution(
    owner: u32,
    contribution: &DMatrix<f64>,
    own_rows: &[usize],
    mask: &[u64],
    codec: &FixedPointCodec,
) -> Result<(MaskedShare, Vec<u64>), RowSumsError> {
    let (n, c) = contribution.shape();
    let mut masked = Vec::with_capacity(n * c);
    for i in 0..n {
        for k in 0..c {
            masked.push(codec.encode(contribution[(i, k)])?.wrapping_add(mask[i * c + k]));
        }
    }
    let mut values = masked.clone();
    for &r in own_rows {
        values[r * c..(r + 1) * c].fill(0);
    }
    Ok((MaskedShare { owner, cols: c, values, zeroed_rows: own_rows.to_vec() }, masked))
}

/// One protocol attempt among `participants` (ids); `contributions[x]` and
/// `row_partition[x]` belong to `participants[x]`. Returns each
/// participant's rows of the total, in the order of its `row_partition`.
///
/// Clients in `late_dropouts` go offline once the server holds every share;
/// their output block comes back with zero rows.
#[allow(clippy::too_many_arguments)]
pub fn secure_row_sums(
    contributions: &[DMatrix<f64>],
    row_partition: &[Vec<usize>],
    participants: &[u32],
    bus: &Bus,
    codec: &FixedPointCodec,
    secrets: &PairwiseSecrets,
    round_id: u64,
    late_dropouts: &[u32],
) -> Result<Vec<DMatrix<f64>>, RowSumsError> {
    let Some(first) = contributions.first() else {
        return Err(RowSumsError::NoParticipants);
    };
    let (n, c) = first.shape();
    validate_partition(row_partition, n)?;
    let bound = codec.bound_for(participants.len());
    for (z, &id) in contributions.iter().zip(participants) {
        if z.shape() != (n, c) {
            return Err(RowSumsError::Shape { client: id, rows: z.nrows(), cols: z.ncols(), n, c });
        }
        if let Some(&v) = z.iter().find(|v| !(v.abs() < bound)) {
            return Err(RowSumsError::Overflow { client: id, value: v, bound });
        }
    }

    // Clients mask and upload.
    let mut kept = Vec::with_capacity(participants.len());
    let mut uploads = Vec::with_capacity(participants.len());
    for ((z, rows), &id) in contributions.iter().zip(row_partition).zip(participants) {
        let mask = mask_for(id, participants, (n, c), secrets, round_id)?;
        let (share, masked) = mask_contribution(id, z, rows, &mask, codec)?;
        let sent = bus.send(
            round_id,
            PartyId::Client(id),
            PartyId::Server,
            MessageKind::MaskedShare,
            encode_u64s(&share.values),
            share.values.len() as u64,
        );
        match sent {
            Ok(bytes) => uploads.push(decode_u64s(&bytes)?),
            Err(BusError::PartyDropped(p)) => return Err(RowSumsError::Dropout(p)),
            Err(e) => return Err(e.into()),
        }
        kept.push(masked);
    }

    for &id in late_dropouts {
        bus.drop_party(PartyId::Client(id));
    }

    // Server aggregates and relays each client's rows.
    let mut total = vec![0u64; n * c];
    for up in &uploads {
        if up.len() != n * c {
            return Err(RowSumsError::Share(format!("{} elements, expected {}", up.len(), n * c)));
        }
        for (t, v) in total.iter_mut().zip(up) {
            *t = t.wrapping_add(*v);
        }
    }
    let mut outputs = Vec::with_capacity(participants.len());
    for ((rows, &id), masked) in row_partition.iter().zip(participants).zip(&kept) {
        let relay: Vec<u64> = rows.iter().flat_map(|&r| total[r * c..(r + 1) * c].iter().copied()).collect();
        let received = match bus.send(
            round_id,
            PartyId::Server,
            PartyId::Client(id),
            MessageKind::AggregateRows,
            encode_u64s(&relay),
            relay.len() as u64,
        ) {
            Ok(bytes) => Some(decode_u64s(&bytes)?),
            // Past aggregation a dropout only costs that client its rows.
            Err(BusError::PartyDropped(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let block = match received {
            Some(values) => DMatrix::from_fn(rows.len(), c, |i, k| {
                codec.decode(values[i * c + k].wrapping_add(masked[rows[i] * c + k]))
            }),
            None => DMatrix::zeros(0, c),
        };
        outputs.push(block);
    }
    Ok(outputs)
}

fn validate_partition(row_partition: &[Vec<usize>], n: usize) -> Result<(), RowSumsError> {
    let mut seen = vec![false; n];
    for &r in row_partition.iter().flatten() {
        if r >= n || seen[r] {
            return Err(RowSumsError::Partition(n));
        }
        seen[r] = true;
    }
    if seen.iter().all(|&s| s) {
        Ok(())
    } else {
        Err(RowSumsError::Partition(n))
    }
}

/// Result of [`row_sums_with_restart`].
#[derive(Debug, Clone, PartialEq)]
pub struct RowSumsOutcome {
    /// Rows of the total for each original participant; `None` if it dropped.
    pub outputs: Vec<Option<DMatrix<f64>>>,
    pub dropped: Vec<u32>,
    /// Round ids used, one per attempt.
    pub rounds: Vec<u64>,
}

/// Runs [`secure_row_sums`] and, whenever a client drops out before the
/// server has every share, restarts without it under a fresh round id.
///
/// The dropped client's rows leave the partition, and so do its labels: the
/// restart sums only the remaining contributions over the remaining rows.
#[allow(clippy::too_many_arguments)]
pub fn row_sums_with_restart(
    contributions: &[DMatrix<f64>],
    row_partition: &[Vec<usize>],
    participants: &[u32],
    bus: &Bus,
    codec: &FixedPointCodec,
    secrets: &PairwiseSecrets,
    first_round: u64,
    late_dropouts: &[u32],
) -> Result<RowSumsOutcome, RowSumsError> {
    let mut active: Vec<usize> = (0..participants.len()).collect();
    let mut dropped = Vec::new();
    let mut rounds = Vec::new();
    let mut round = first_round;
    let n = contributions.first().map_or(0, |z| z.nrows());
    loop {
        if active.is_empty() {
            return Err(RowSumsError::NoParticipants);
        }
        rounds.push(round);
        // Rows of dropped clients go to nobody; they are dropped from the
        // partition by relabeling the remaining rows into a compact range.
        let keep_rows: Vec<usize> = active.iter().flat_map(|&x| row_partition[x].iter().copied()).collect();
        let mut remap = vec![usize::MAX; n];
        let mut sorted = keep_rows.clone();
        sorted.sort_unstable();
        for (new, &old) in sorted.iter().enumerate() {
            remap[old] = new;
        }
        let sub_contrib: Vec<DMatrix<f64>> =
            active.iter().map(|&x| contributions[x].select_rows(sorted.iter())).collect();
        let sub_partition: Vec<Vec<usize>> =
            active.iter().map(|&x| row_partition[x].iter().map(|&r| remap[r]).collect()).collect();
        let ids: Vec<u32> = active.iter().map(|&x| participants[x]).collect();
        match secure_row_sums(&sub_contrib, &sub_partition, &ids, bus, codec, secrets, round, late_dropouts) {
            Ok(blocks) => {
                let mut outputs = vec![None; participants.len()];
                for (&x, block) in active.iter().zip(blocks) {
                    let received = block.nrows() == row_partition[x].len() && !bus.is_dropped(PartyId::Client(participants[x]));
                    outputs[x] = received.then_some(block);
                }
                return Ok(RowSumsOutcome { outputs, dropped, rounds });
            }
            Err(RowSumsError::Dropout(PartyId::Client(id))) => {
                active.retain(|&x| participants[x] != id);
                dropped.push(id);
                round += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn two_client_masks_are_negatives() {
        let s = PairwiseSecrets::derive(&[0, 1], 5);
        let m = derive_pairwise_masks(&[0, 1], (3, 2), &s, 1).unwrap();
        for (a, b) in m[0].iter().zip(&m[1]) {
            assert_eq!(a.wrapping_add(*b), 0);
        }
        assert_ne!(m[0], vec![0; 6]);
    }

    #[test]
    fn masks_are_deterministic_and_round_dependent() {
        let s = PairwiseSecrets::derive(&[0, 1, 2], 5);
        let a = derive_pairwise_masks(&[0, 1, 2], (2, 2), &s, 1).unwrap();
        assert_eq!(a, derive_pairwise_masks(&[0, 1, 2], (2, 2), &s, 1).unwrap());
        assert_ne!(a, derive_pairwise_masks(&[0, 1, 2], (2, 2), &s, 2).unwrap());
    }

    #[test]
    fn missing_secret_is_an_error() {
        let s = PairwiseSecrets::derive(&[0, 1], 5);
        assert_eq!(derive_pairwise_masks(&[0, 1, 2], (1, 1), &s, 0), Err(RowSumsError::MissingSecret(0, 2)));
    }

    #[test]
    fn two_client_example() {
        let z1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let z2 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        let s = PairwiseSecrets::derive(&[0, 1], 1);
        let out = secure_row_sums(&[z1, z2], &[vec![0], vec![1]], &[0, 1], &Bus::new(), &FixedPointCodec::default(), &s, 1, &[])
            .unwrap();
        assert_eq!(out[0], DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        assert_eq!(out[1], DMatrix::from_row_slice(1, 2, &[2.0, 0.0]));
    }

    #[test]
    fn single_client_gets_own_rows() {
        let z = DMatrix::from_row_slice(2, 1, &[0.25, -3.0]);
        let s = PairwiseSecrets::derive(&[7], 1);
        let out = secure_row_sums(std::slice::from_ref(&z), &[vec![0, 1]], &[7], &Bus::new(), &FixedPointCodec::default(), &s, 0, &[]).unwrap();
        assert_eq!(out[0], z);
    }

    #[test]
    fn overflow_and_partition_errors() {
        let codec = FixedPointCodec::default();
        let s = PairwiseSecrets::derive(&[0, 1], 1);
        let big = DMatrix::from_element(1, 1, codec.bound_for(2));
        let small = DMatrix::from_element(1, 1, 0.0);
        let err = secure_row_sums(&[big, small.clone()], &[vec![0], vec![]], &[0, 1], &Bus::new(), &codec, &s, 0, &[]);
        assert!(matches!(err, Err(RowSumsError::Overflow { client: 0, .. })));
        let err = secure_row_sums(&[small.clone(), small], &[vec![0], vec![0]], &[0, 1], &Bus::new(), &codec, &s, 0, &[]);
        assert_eq!(err, Err(RowSumsError::Partition(1)));
    }

    #[test]
    fn dropout_restarts_without_client() {
        let codec = FixedPointCodec::default();
        let ids = [0, 1, 2];
        let s = PairwiseSecrets::derive(&ids, 1);
        let z: Vec<DMatrix<f64>> = (0..3).map(|j| DMatrix::from_element(3, 2, j as f64 + 1.0)).collect();
        let partition = vec![vec![0], vec![1], vec![2]];
        let bus = Bus::new();
        bus.drop_party(PartyId::Client(1));
        let out = row_sums_with_restart(&z, &partition, &ids, &bus, &codec, &s, 10, &[]).unwrap();
        assert_eq!(out.dropped, vec![1]);
        assert_eq!(out.rounds, vec![10, 11]);
        assert!(out.outputs[1].is_none());
        // Without client 1: totals are 1 + 3 = 4
        assert_eq!(out.outputs[0].as_ref().unwrap(), &DMatrix::from_element(1, 2, 4.0));
        assert_eq!(out.outputs[2].as_ref().unwrap(), &DMatrix::from_element(1, 2, 4.0));
    }

    #[test]
    fn late_dropout_only_loses_own_rows() {
        let codec = FixedPointCodec::default();
        let ids = [0, 1];
        let s = PairwiseSecrets::derive(&ids, 1);
        let z: Vec<DMatrix<f64>> = (0..2).map(|_| DMatrix::from_element(2, 1, 1.5)).collect();
        let out = row_sums_with_restart(&z, &[vec![0], vec![1]], &ids, &Bus::new(), &codec, &s, 0, &[1]).unwrap();
        assert_eq!(out.rounds, vec![0]);
        assert_eq!(out.outputs[0].as_ref().unwrap(), &DMatrix::from_element(1, 1, 3.0));
        assert!(out.outputs[1].is_none());
    }

    #[test]
    fn server_relays_only_owner_rows() {
        let codec = FixedPointCodec::default();
        let ids = [0, 1];
        let s = PairwiseSecrets::derive(&ids, 1);
        let z: Vec<DMatrix<f64>> = (0..2).map(|_| DMatrix::from_element(5, 3, 1.0)).collect();
        let bus = Bus::with_payload_log();
        secure_row_sums(&z, &[vec![0, 1], vec![2, 3, 4]], &ids, &bus, &codec, &s, 0, &[]).unwrap();
        let relays: Vec<_> = bus.records().into_iter().filter(|r| r.kind == MessageKind::AggregateRows).collect();
        assert_eq!(relays[0].elements, 6);
        assert_eq!(relays[1].elements, 9);
        // uploads have the owner's rows zeroed
        for r in bus.records().iter().filter(|r| r.kind == MessageKind::MaskedShare) {
            let v = decode_u64s(r.payload.as_ref().unwrap()).unwrap();
            let own: &[usize] = if r.from == PartyId::Client(0) { &[0, 1] } else { &[2, 3, 4] };
            for &row in own {
                assert!(v[row * 3..row * 3 + 3].iter().all(|&x| x == 0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn masks_sum_to_zero(m in 1usize..7, n in 1usize..5, c in 1usize..4, root in any::<u64>()) {
            let ids: Vec<u32> = (0..m as u32).map(|x| x * 3 + 1).collect();
            let s = PairwiseSecrets::derive(&ids, root);
            let masks = derive_pairwise_masks(&ids, (n, c), &s, 4).unwrap();
            for e in 0..n * c {
                prop_assert_eq!(masks.iter().fold(0u64, |a, mk| a.wrapping_add(mk[e])), 0);
            }
        }

        #[test]
        fn matches_plaintext_sum(seed in any::<u64>(), m in 1usize..6, n in 1usize..12, c in 1usize..4) {
            let mut rng = derive_rng(seed, "test/rowsums", &[]);
            let codec = FixedPointCodec::default();
            let ids: Vec<u32> = (0..m as u32).collect();
            let z: Vec<DMatrix<f64>> = (0..m).map(|_| DMatrix::from_fn(n, c, |_, _| rng.random_range(-100.0..100.0))).collect();
            let mut partition = vec![Vec::new(); m];
            for r in 0..n {
                partition[rng.random_range(0..m)].push(r);
            }
            let s = PairwiseSecrets::derive(&ids, seed);
            let out = secure_row_sums(&z, &partition, &ids, &Bus::new(), &codec, &s, 0, &[]).unwrap();
            let total = z.iter().fold(DMatrix::zeros(n, c), |acc, x| acc + x);
            for (rows, block) in partition.iter().zip(&out) {
                for (i, &r) in rows.iter().enumerate() {
                    for k in 0..c {
                        prop_assert!((block[(i, k)] - total[(r, k)]).abs() <= 1e-5);
                    }
                }
            }
        }
    }
}
