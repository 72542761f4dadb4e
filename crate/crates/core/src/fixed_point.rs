//! Fixed-point encoding of reals into the ring `Z_2^64`.
//!
//! `encode(x) = round(x * 2^f) mod 2^64`, read back as a two's-complement
//! integer. Sums of encodings decode to the sum of the inputs as long as the
//! true sum stays below `2^(63 - f)` in magnitude.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_FRACTION_BITS: u32 = 24;

#[derive(Debug, Error, PartialEq)]
pub enum FixedPointError {
    #[error("fraction bits {0} out of range 0..=52")]
    FractionBits(u32),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("value {value} exceeds the encodable bound {bound}")]
    Overflow { value: f64, bound: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    fraction_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self { fraction_bits: DEFAULT_FRACTION_BITS }
    }
}

impl FixedPointCodec {
    pub fn new(fraction_bits: u32) -> Result<Self, FixedPointError> {
        if fraction_bits > 52 {
            return Err(FixedPointError::FractionBits(fraction_bits));
        }
        Ok(Self { fraction_bits })
    }

    pub fn fraction_bits(&self) -> u32 {
        self.fraction_bits
    }

    fn scale(&self) -> f64 {
        (1u64 << self.fraction_bits) as f64
    }

    /// `2^-f`, the rounding step.
    pub fn resolution(&self) -> f64 {
        1.0 / self.scale()
    }

    /// Largest magnitude each of `parties` summands may have so that the
    /// ring sum cannot wrap.
    pub fn bound_for(&self, parties: usize) -> f64 {
        2f64.powi(63 - self.fraction_bits as i32) / parties.max(1) as f64
    }

    pub fn encode(&self, x: f64) -> Result<u64, FixedPointError> {
        if !x.is_finite() {
            return Err(FixedPointError::NonFinite(x));
        }
        let scaled = (x * self.scale()).round();
        let limit = 2f64.powi(63);
        if scaled >= limit || scaled < -limit {
            return Err(FixedPointError::Overflow { value: x, bound: self.bound_for(1) });
        }
        Ok(scaled as i64 as u64)
    }

    pub fn decode(&self, v: u64) -> f64 {
        v as i64 as f64 / self.scale()
    }
}
