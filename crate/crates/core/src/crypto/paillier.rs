//! Paillier encryption with `g = N + 1`, CRT decryption and short-exponent
//! randomizers.
//!
//! Encryption computes `(1 + mN) * h^x mod N^2`, where `h = s^N mod N^2` is a
//! random N-th residue published with the key and `x` has `bits(N) / 2` bits.
//! `h^x` comes from a fixed-base window table, which makes encryption about
//! an order of magnitude cheaper than a full `r^N` exponentiation.

use std::sync::OnceLock;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::RngCore;
use thiserror::Error;

use super::monty::{Loaded, MontyModulus};
use super::prime::{random_below, random_bits, random_prime};

const WINDOW_BITS: u64 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PaillierError {
    #[error("modulus size {0} bits is unsupported (need an even size of at least 128)")]
    KeySize(u64),
    #[error("plaintext exceeds the modulus")]
    PlaintextRange,
    #[error("ciphertext is outside Z*_(N^2)")]
    InvalidCiphertext,
    #[error("malformed key or ciphertext encoding: {0}")]
    Encoding(String),
}

/// Named key sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyProfile {
    /// 256-bit modulus. Trivially breakable; only for exactness fixtures.
    Test256,
    /// 512-bit modulus. Fast and NOT secure; for tests and desk runs.
    Test512,
    /// 2048-bit modulus.
    Standard2048,
}

impl KeyProfile {
    pub fn modulus_bits(self) -> u64 {
        match self {
            KeyProfile::Test256 => 256,
            KeyProfile::Test512 => 512,
            KeyProfile::Standard2048 => 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext(BigUint);

impl Ciphertext {
    pub fn from_value(value: BigUint) -> Self {
        Self(value)
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }
}

#[derive(Debug)]
pub struct PaillierPublicKey {
    n: BigUint,
    n_squared: BigUint,
    h: BigUint,
    exp_bits: u64,
    table: OnceLock<(MontyModulus, Loaded)>,
}

impl Clone for PaillierPublicKey {
    fn clone(&self) -> Self {
        Self {
            n: self.n.clone(),
            n_squared: self.n_squared.clone(),
            h: self.h.clone(),
            exp_bits: self.exp_bits,
            table: OnceLock::new(),
        }
    }
}

impl PartialEq for PaillierPublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.h == other.h
    }
}

impl PaillierPublicKey {
    pub fn from_parts(n: BigUint, h: BigUint) -> Result<Self, PaillierError> {
        let bits = n.bits();
        if bits < 128 || n.is_zero() || !n.bit(0) {
            return Err(PaillierError::KeySize(bits));
        }
        let n_squared = &n * &n;
        if h.is_zero() || h >= n_squared {
            return Err(PaillierError::Encoding("randomizer base out of range".into()));
        }
        Ok(Self { exp_bits: bits.div_ceil(2), n, n_squared, h, table: OnceLock::new() })
    }

    /// The plaintext modulus `N`.
    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    /// Width of a serialized ciphertext.
    pub fn ciphertext_bytes(&self) -> usize {
        self.n_squared.bits().div_ceil(8) as usize
    }

    /// `h^(v * 2^(8w))` for every window `w` and byte `v`, flattened.
    fn table(&self) -> &(MontyModulus, Loaded) {
        self.table.get_or_init(|| {
            let windows = self.exp_bits.div_ceil(WINDOW_BITS);
            let mut base = self.h.clone();
            let mut out = Vec::with_capacity((windows as usize) << WINDOW_BITS);
            for _ in 0..windows {
                let start = out.len();
                out.push(BigUint::one());
                for v in 1..(1usize << WINDOW_BITS) {
                    let next = (&out[start + v - 1] * &base) % &self.n_squared;
                    out.push(next);
                }
                base = (&out[start + (1 << WINDOW_BITS) - 1] * &base) % &self.n_squared;
            }
            let modulus = MontyModulus::new(&self.n_squared);
            let loaded = modulus.load(&out);
            (modulus, loaded)
        })
    }

    fn randomizer<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        let x = random_bits(self.exp_bits, rng).to_bytes_le();
        let (modulus, table) = self.table();
        let picks = x.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, &b)| (i << WINDOW_BITS) | b as usize);
        modulus.product(table, picks)
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext, PaillierError> {
        if m >= &self.n {
            return Err(PaillierError::PlaintextRange);
        }
        let gm = BigUint::one() + m * &self.n;
        Ok(Ciphertext((gm * self.randomizer(rng)) % &self.n_squared))
    }

    pub fn encrypt_u64<R: RngCore + ?Sized>(&self, m: u64, rng: &mut R) -> Ciphertext {
        self.encrypt(&BigUint::from(m), rng).expect("u64 fits any supported modulus")
    }

    /// Plaintext addition.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Ciphertext {
        Ciphertext((&a.0 * &b.0) % &self.n_squared)
    }

    /// Plaintext negation.
    pub fn neg(&self, a: &Ciphertext) -> Result<Ciphertext, PaillierError> {
        a.0.modinv(&self.n_squared).map(Ciphertext).ok_or(PaillierError::InvalidCiphertext)
    }

    pub fn sub(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, PaillierError> {
        Ok(self.add(a, &self.neg(b)?))
    }

    /// Multiplication of the plaintext by a public constant.
    pub fn mul_plain(&self, a: &Ciphertext, k: &BigUint) -> Ciphertext {
        Ciphertext(a.0.modpow(k, &self.n_squared))
    }

    /// `u64 len | N | u64 len | h`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [&self.n, &self.h] {
            let b = v.to_bytes_le();
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PaillierError> {
        let mut rest = bytes;
        let mut parts = Vec::with_capacity(2);
        for _ in 0..2 {
            if rest.len() < 8 {
                return Err(PaillierError::Encoding("truncated length".into()));
            }
            let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
            rest = &rest[8..];
            if (rest.len() as u64) < len {
                return Err(PaillierError::Encoding("truncated value".into()));
            }
            parts.push(BigUint::from_bytes_le(&rest[..len as usize]));
            rest = &rest[len as usize..];
        }
        if !rest.is_empty() {
            return Err(PaillierError::Encoding("trailing bytes".into()));
        }
        let h = parts.pop().expect("two parts");
        let n = parts.pop().expect("two parts");
        Self::from_parts(n, h)
    }

    /// Fixed-width little-endian encoding of a batch of ciphertexts.
    pub fn encode_ciphertexts(&self, cts: &[Ciphertext]) -> Vec<u8> {
        let width = self.ciphertext_bytes();
        let mut out = Vec::with_capacity(width * cts.len());
        for c in cts {
            let mut b = c.0.to_bytes_le();
            b.resize(width, 0);
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn decode_ciphertexts(&self, bytes: &[u8]) -> Result<Vec<Ciphertext>, PaillierError> {
        let width = self.ciphertext_bytes();
        if !bytes.len().is_multiple_of(width) {
            return Err(PaillierError::Encoding(format!("{} bytes is not a multiple of {width}", bytes.len())));
        }
        bytes
            .chunks_exact(width)
            .map(|c| {
                let v = BigUint::from_bytes_le(c);
                if v.is_zero() || v >= self.n_squared {
                    Err(PaillierError::InvalidCiphertext)
                } else {
                    Ok(Ciphertext(v))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PaillierSecretKey {
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    hp: BigUint,
    hq: BigUint,
    p_inv_q: BigUint,
    n_squared: BigUint,
    p_monty: MontyModulus,
    q_monty: MontyModulus,
}

impl PaillierSecretKey {
    fn new(p: BigUint, q: BigUint) -> Result<Self, PaillierError> {
        let n = &p * &q;
        let n_squared = &n * &n;
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let g = &n + 1u32;
        let hp = Self::h_factor(&g, &p, &p_squared)?;
        let hq = Self::h_factor(&g, &q, &q_squared)?;
        let p_inv_q = p.modinv(&q).ok_or(PaillierError::KeySize(n.bits()))?;
        let (p_monty, q_monty) = (MontyModulus::new(&p_squared), MontyModulus::new(&q_squared));
        Ok(Self { p, q, p_squared, q_squared, hp, hq, p_inv_q, n_squared, p_monty, q_monty })
    }

    fn h_factor(g: &BigUint, p: &BigUint, p_squared: &BigUint) -> Result<BigUint, PaillierError> {
        let p_minus_one = p - 1u32;
        let u = g.modpow(&p_minus_one, p_squared);
        let l = (u - 1u32) / p;
        l.modinv(p).ok_or(PaillierError::KeySize(p.bits() * 2))
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        if c.0.is_zero() || c.0 >= self.n_squared {
            return Err(PaillierError::InvalidCiphertext);
        }
        let mp = Self::half(&c.0, &self.p, &self.p_squared, &self.p_monty, &self.hp)?;
        let mq = Self::half(&c.0, &self.q, &self.q_squared, &self.q_monty, &self.hq)?;
        // m = mp + p * ((mq - mp) * p^-1 mod q)
        let diff = (&mq + &self.q - (&mp % &self.q)) % &self.q;
        let t = (diff * &self.p_inv_q) % &self.q;
        Ok(mp + &self.p * t)
    }

    fn half(c: &BigUint, p: &BigUint, p_squared: &BigUint, monty: &MontyModulus, hp: &BigUint) -> Result<BigUint, PaillierError> {
        let u = monty.pow(&(c % p_squared), &(p - 1u32));
        if (&u % p) != BigUint::one() {
            return Err(PaillierError::InvalidCiphertext);
        }
        let l = (u - 1u32) / p;
        Ok((l * hp) % p)
    }
}

#[derive(Debug, Clone)]
pub struct PaillierKeypair {
    pub public: PaillierPublicKey,
    pub secret: PaillierSecretKey,
}

impl PaillierKeypair {
    pub fn generate<R: RngCore + ?Sized>(modulus_bits: u64, rng: &mut R) -> Result<Self, PaillierError> {
        if modulus_bits < 128 || !modulus_bits.is_multiple_of(2) {
            return Err(PaillierError::KeySize(modulus_bits));
        }
        loop {
            let p = random_prime(modulus_bits / 2, rng);
            let q = random_prime(modulus_bits / 2, rng);
            if p == q {
                continue;
            }
            let n = &p * &q;
            let n_squared = &n * &n;
            let s = loop {
                let s = random_below(&n, rng);
                if !s.is_zero() && s.modinv(&n).is_some() {
                    break s;
                }
            };
            let h = s.modpow(&n, &n_squared);
            let public = PaillierPublicKey::from_parts(n, h)?;
            let secret = PaillierSecretKey::new(p, q)?;
            return Ok(Self { public, secret });
        }
    }
}
