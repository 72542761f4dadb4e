//! Random-hyperplane sign hashing.
//!
//! All parties derive the same `L x d` Gaussian projection from a shared seed.
//! Each row `v` becomes `L` bits, bit `l` set iff `<pi_l, v> >= 0`. The
//! Hamming distance `h` between two codes estimates the angle between the
//! vectors as `pi * h / L`, so `cos(pi * h / L)` estimates cosine similarity.
//!
//! The projection stream is ChaCha20 keyed by the seed, read row-major, each
//! 64-bit output mapped to a uniform in (0, 1) and then through the inverse
//! standard normal CDF. Nothing depends on platform endianness or word size.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LshError {
    #[error("code length must be at least 1")]
    EmptyCode,
    #[error("feature dimension must be at least 1")]
    EmptyDimension,
    #[error("features have {features} columns but the projection expects {projection}")]
    DimensionMismatch { features: usize, projection: usize },
    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("hamming distance {hamming} outside [0, {code_length}]")]
    HammingOutOfRange { hamming: u64, code_length: usize },
    #[error("invalid code encoding: {0}")]
    Encoding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    seed: u64,
    code_length: usize,
    dim: usize,
}

impl ProjectionSpec {
    pub fn new(seed: u64, code_length: usize, dim: usize) -> Result<Self, LshError> {
        if code_length == 0 {
            return Err(LshError::EmptyCode);
        }
        if dim == 0 {
            return Err(LshError::EmptyDimension);
        }
        Ok(Self { seed, code_length, dim })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Builds the shared `L x d` projection with i.i.d. standard normal entries.
pub fn generate_projection(spec: &ProjectionSpec) -> DMatrix<f64> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&spec.seed.to_le_bytes());
    key[8..24].copy_from_slice(b"xclp/projection\0");
    let mut rng = ChaCha20Rng::from_seed(key);
    let normal = Normal::standard();
    // Top 53 bits, centered in their bucket: never exactly 0 or 1.
    let scale = 1.0 / (1u64 << 53) as f64;
    DMatrix::from_row_iterator(
        spec.code_length,
        spec.dim,
        (0..spec.code_length * spec.dim).map(|_| {
            let u = ((rng.next_u64() >> 11) as f64 + 0.5) * scale;
            normal.inverse_cdf(u)
        }),
    )
}

/// Packed sign codes, `rows x code_length` bits, 64 bits per word.
///
/// Bits past `code_length` in each row's last word are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitCodeMatrix {
    rows: usize,
    code_length: usize,
    words: Vec<u64>,
}

impl BitCodeMatrix {
    pub fn words_per_row(code_length: usize) -> usize {
        code_length.div_ceil(64)
    }

    pub fn zeros(rows: usize, code_length: usize) -> Self {
        Self { rows, code_length, words: vec![0; rows * Self::words_per_row(code_length)] }
    }

    /// Builds codes from explicit bit rows (all of equal length).
    pub fn from_bits(rows: &[Vec<bool>]) -> Result<Self, LshError> {
        let code_length = rows.first().map_or(0, Vec::len);
        if code_length == 0 {
            return Err(LshError::EmptyCode);
        }
        let mut out = Self::zeros(rows.len(), code_length);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != code_length {
                return Err(LshError::Encoding(format!("row {i} has {} bits, expected {code_length}", r.len())));
            }
            for (l, &b) in r.iter().enumerate() {
                out.set(i, l, b);
            }
        }
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    pub fn row(&self, i: usize) -> &[u64] {
        let w = Self::words_per_row(self.code_length);
        &self.words[i * w..(i + 1) * w]
    }

    pub fn bit(&self, i: usize, l: usize) -> bool {
        (self.row(i)[l / 64] >> (l % 64)) & 1 == 1
    }

    pub fn row_bits(&self, i: usize) -> Vec<bool> {
        (0..self.code_length).map(|l| self.bit(i, l)).collect()
    }

    pub fn row_weight(&self, i: usize) -> u32 {
        self.row(i).iter().map(|w| w.count_ones()).sum()
    }

    fn set(&mut self, i: usize, l: usize, value: bool) {
        let w = Self::words_per_row(self.code_length);
        let word = &mut self.words[i * w + l / 64];
        if value {
            *word |= 1 << (l % 64);
        } else {
            *word &= !(1 << (l % 64));
        }
    }

    /// Popcount of XOR between row `i` of `self` and row `j` of `other`.
    pub fn hamming(&self, i: usize, other: &Self, j: usize) -> u32 {
        debug_assert_eq!(self.code_length, other.code_length);
        self.row(i).iter().zip(other.row(j)).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    /// Codes for a subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let w = Self::words_per_row(self.code_length);
        let mut words = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            words.extend_from_slice(self.row(r));
        }
        Self { rows: rows.len(), code_length: self.code_length, words }
    }

    /// `u64` rows, `u64` code length, then packed words row-major, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.words.len());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.code_length as u64).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LshError> {
        if bytes.len() < 16 {
            return Err(LshError::Encoding("missing header".into()));
        }
        let rows = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let code_length = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if code_length == 0 {
            return Err(LshError::EmptyCode);
        }
        let per_row = code_length.div_ceil(64);
        let expected = rows
            .checked_mul(per_row)
            .and_then(|w| w.checked_mul(8))
            .ok_or_else(|| LshError::Encoding("size overflows".into()))?;
        let body = &bytes[16..];
        if body.len() as u64 != expected {
            return Err(LshError::Encoding(format!("expected {expected} payload bytes, found {}", body.len())));
        }
        let words: Vec<u64> = body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tail_bits = (code_length % 64) as u32;
        if tail_bits != 0 {
            let mask = !0u64 << tail_bits;
            for (r, chunk) in words.chunks(per_row as usize).enumerate() {
                if chunk[per_row as usize - 1] & mask != 0 {
                    return Err(LshError::Encoding(format!("row {r} has bits set past the code length")));
                }
            }
        }
        Ok(Self { rows: rows as usize, code_length: code_length as usize, words })
    }
}

/// Sign-hashes every row of `features` (`n x d`) with `projection` (`L x d`).
///
/// A zero inner product maps to bit 1.
pub fn hash_features(features: &DMatrix<f64>, projection: &DMatrix<f64>) -> Result<BitCodeMatrix, LshError> {
    if features.ncols() != projection.ncols() {
        return Err(LshError::DimensionMismatch { features: features.ncols(), projection: projection.ncols() });
    }
    for col in 0..features.ncols() {
        for row in 0..features.nrows() {
            if !features[(row, col)].is_finite() {
                return Err(LshError::NonFinite { row, col });
            }
        }
    }
    let code_length = projection.nrows();
    let n = features.nrows();
    if code_length == 0 {
        return Err(LshError::EmptyCode);
    }
    // (L x d) * (d x n): column i holds the L projections of row i.
    let projected = projection * features.transpose();
    let mut codes = BitCodeMatrix::zeros(n, code_length);
    let per_row = BitCodeMatrix::words_per_row(code_length);
    for i in 0..n {
        let column = projected.column(i);
        let words = &mut codes.words[i * per_row..(i + 1) * per_row];
        for (l, &v) in column.iter().enumerate() {
            if v >= 0.0 {
                words[l / 64] |= 1 << (l % 64);
            }
        }
    }
    Ok(codes)
}

/// `cos(pi * hamming / code_length)`.
pub fn estimate_cosine(hamming: u64, code_length: usize) -> Result<f64, LshError> {
    if code_length == 0 {
        return Err(LshError::EmptyCode);
    }
    if hamming > code_length as u64 {
        return Err(LshError::HammingOutOfRange { hamming, code_length });
    }
    if hamming == 0 {
        return Ok(1.0);
    }
    if hamming == code_length as u64 {
        return Ok(-1.0);
    }
    Ok((std::f64::consts::PI * hamming as f64 / code_length as f64).cos())
}
