//! Products modulo a fixed odd modulus in Montgomery form.
//!
//! Moduli up to 4096 bits use stack-allocated fixed-width limbs; anything
//! else falls back to plain `BigUint` arithmetic.

use crypto_bigint::modular::{FixedMontyForm, FixedMontyParams};
use crypto_bigint::{Odd, Uint};
use num_bigint::BigUint;
use num_traits::One;

#[derive(Debug, Clone)]
struct Fixed<const L: usize> {
    params: FixedMontyParams<L>,
}

impl<const L: usize> Fixed<L> {
    fn new(m: &BigUint) -> Option<Self> {
        let odd = Option::<Odd<Uint<L>>>::from(Odd::new(to_uint::<L>(m)?))?;
        Some(Self { params: FixedMontyParams::new_vartime(odd) })
    }

    fn load(&self, x: &BigUint) -> FixedMontyForm<L> {
        FixedMontyForm::new(&to_uint::<L>(x).expect("operand narrower than modulus"), &self.params)
    }

    fn product(&self, forms: &[FixedMontyForm<L>], pick: impl Iterator<Item = usize>) -> BigUint {
        let mut acc = FixedMontyForm::one(&self.params);
        for i in pick {
            acc = acc.mul(&forms[i]);
        }
        from_uint(&acc.retrieve())
    }

    fn pow(&self, base: &BigUint, exponent: &BigUint) -> Option<BigUint> {
        let e = to_uint::<L>(exponent)?;
        Some(from_uint(&self.load(base).pow_bounded_exp(&e, exponent.bits() as u32).retrieve()))
    }
}

fn to_uint<const L: usize>(x: &BigUint) -> Option<Uint<L>> {
    let digits = x.to_u64_digits();
    if digits.len() > L {
        return None;
    }
    let mut words = [0u64; L];
    words[..digits.len()].copy_from_slice(&digits);
    Some(Uint::from_words(words))
}

fn from_uint<const L: usize>(x: &Uint<L>) -> BigUint {
    let digits: Vec<u32> = x.as_words().iter().flat_map(|&w| [w as u32, (w >> 32) as u32]).collect();
    BigUint::new(digits)
}

#[derive(Debug, Clone)]
enum Kind {
    W4(Fixed<4>),
    W8(Fixed<8>),
    W16(Fixed<16>),
    W32(Box<Fixed<32>>),
    W64(Box<Fixed<64>>),
    Plain,
}

/// Elements already converted for one [`MontyModulus`].
#[derive(Debug, Clone)]
pub enum Loaded {
    W4(Vec<FixedMontyForm<4>>),
    W8(Vec<FixedMontyForm<8>>),
    W16(Vec<FixedMontyForm<16>>),
    W32(Vec<FixedMontyForm<32>>),
    W64(Vec<FixedMontyForm<64>>),
    Plain(Vec<BigUint>),
}

#[derive(Debug, Clone)]
pub struct MontyModulus {
    modulus: BigUint,
    kind: Kind,
}

impl MontyModulus {
    /// `m` must be odd.
    pub fn new(m: &BigUint) -> Self {
        let bits = m.bits();
        let kind = match bits {
            0..=256 => Fixed::new(m).map(Kind::W4),
            257..=512 => Fixed::new(m).map(Kind::W8),
            513..=1024 => Fixed::new(m).map(Kind::W16),
            1025..=2048 => Fixed::new(m).map(|f| Kind::W32(Box::new(f))),
            2049..=4096 => Fixed::new(m).map(|f| Kind::W64(Box::new(f))),
            _ => None,
        }
        .unwrap_or(Kind::Plain);
        Self { modulus: m.clone(), kind }
    }

    /// Converts residues (each below the modulus).
    pub fn load<'a>(&self, values: impl IntoIterator<Item = &'a BigUint>) -> Loaded {
        let values = values.into_iter();
        match &self.kind {
            Kind::W4(f) => Loaded::W4(values.map(|v| f.load(v)).collect()),
            Kind::W8(f) => Loaded::W8(values.map(|v| f.load(v)).collect()),
            Kind::W16(f) => Loaded::W16(values.map(|v| f.load(v)).collect()),
            Kind::W32(f) => Loaded::W32(values.map(|v| f.load(v)).collect()),
            Kind::W64(f) => Loaded::W64(values.map(|v| f.load(v)).collect()),
            Kind::Plain => Loaded::Plain(values.cloned().collect()),
        }
    }

    /// Product of the picked elements of `loaded`, reduced.
    pub fn product(&self, loaded: &Loaded, pick: impl Iterator<Item = usize>) -> BigUint {
        match (&self.kind, loaded) {
            (Kind::W4(f), Loaded::W4(v)) => f.product(v, pick),
            (Kind::W8(f), Loaded::W8(v)) => f.product(v, pick),
            (Kind::W16(f), Loaded::W16(v)) => f.product(v, pick),
            (Kind::W32(f), Loaded::W32(v)) => f.product(v, pick),
            (Kind::W64(f), Loaded::W64(v)) => f.product(v, pick),
            (Kind::Plain, Loaded::Plain(v)) => pick.fold(BigUint::one(), |acc, i| (acc * &v[i]) % &self.modulus),
            _ => panic!("elements loaded for a different modulus"),
        }
    }

    /// `base^exponent`, with `base` below the modulus. The running time
    /// depends only on the exponent's bit length.
    pub fn pow(&self, base: &BigUint, exponent: &BigUint) -> BigUint {
        let fixed = match &self.kind {
            Kind::W4(f) => f.pow(base, exponent),
            Kind::W8(f) => f.pow(base, exponent),
            Kind::W16(f) => f.pow(base, exponent),
            Kind::W32(f) => f.pow(base, exponent),
            Kind::W64(f) => f.pow(base, exponent),
            Kind::Plain => None,
        };
        fixed.unwrap_or_else(|| base.modpow(exponent, &self.modulus))
    }
}
