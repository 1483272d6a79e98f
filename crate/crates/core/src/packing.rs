//! Packing several slot values into one plaintext, `X = x_0 + x_1 P + x_2 P^2 + ...`.
//!
//! The modulus `n` has exactly `plaintext_bits` bits, so the top slot only
//! gets `plaintext_bits - 1 - (slots - 1) * log2(P)` bits of headroom. Every
//! layout check is done against these per-slot capacities.

use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, Zero};

use crate::encoding::{ceil_log2, decode, EncodingParams};
use crate::error::EncodingError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PackingMode {
    /// Slot contents are reproduced bit for bit.
    Exact,
    /// Slot contents may exceed `P` by a factor below `S^(level-1)`; the bits under
    /// `S^(level-1)` are discarded on unpacking.
    Approximate,
}

/// How values are laid out in one plaintext.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackingLayout {
    plaintext_bits: u32,
    slot_bits: u32,
    slot_count: usize,
    params: EncodingParams,
    mode: PackingMode,
    level: u32,
}

impl PackingLayout {
    /// Exact layout with `P = 2^slot_bits`.
    pub fn exact(
        plaintext_bits: u32,
        slot_bits: u32,
        params: EncodingParams,
        level: u32,
    ) -> Result<Self, EncodingError> {
        Self::build(plaintext_bits, slot_bits, params, PackingMode::Exact, level)
    }

    /// Approximate layout with `P = 2^slot_bits`; reserves `S^(level-1)` of headroom.
    pub fn approximate(
        plaintext_bits: u32,
        slot_bits: u32,
        params: EncodingParams,
        level: u32,
    ) -> Result<Self, EncodingError> {
        Self::build(plaintext_bits, slot_bits, params, PackingMode::Approximate, level)
    }

    /// One value per plaintext, using the whole plaintext space.
    pub fn unpacked(plaintext_bits: u32, params: EncodingParams, level: u32) -> Result<Self, EncodingError> {
        Self::build(plaintext_bits, plaintext_bits, params, PackingMode::Exact, level)
    }

    fn build(
        plaintext_bits: u32,
        slot_bits: u32,
        params: EncodingParams,
        mode: PackingMode,
        level: u32,
    ) -> Result<Self, EncodingError> {
        if level == 0 {
            return Err(EncodingError::InvalidParams("level must be at least 1".into()));
        }
        if slot_bits < params.slot_mod_bits() {
            return Err(EncodingError::CannotPack(format!(
                "slot size 2^{slot_bits} is smaller than slot modulus 2^{}",
                params.slot_mod_bits()
            )));
        }
        let headroom = match mode {
            PackingMode::Exact => 0,
            PackingMode::Approximate => params.scale_bits() * (level - 1),
        };
        let usable = plaintext_bits.saturating_sub(headroom);
        let slot_count = (usable / slot_bits) as usize;
        if slot_count == 0 {
            return Err(EncodingError::CannotPack(format!(
                "slot size 2^{slot_bits} does not fit a {plaintext_bits}-bit plaintext"
            )));
        }
        let layout = PackingLayout { plaintext_bits, slot_bits, slot_count, params, mode, level };
        if layout.top_capacity_bits() < params.slot_mod_bits() {
            return Err(EncodingError::CannotPack("top slot cannot hold the slot modulus".into()));
        }
        Ok(layout)
    }

    pub fn plaintext_bits(&self) -> u32 {
        self.plaintext_bits
    }

    pub fn slot_bits(&self) -> u32 {
        self.slot_bits
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn params(&self) -> EncodingParams {
        self.params
    }

    pub fn mode(&self) -> PackingMode {
        self.mode
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn is_single_slot(&self) -> bool {
        self.slot_count == 1
    }

    /// Same layout, different content level.
    pub fn with_level(&self, level: u32) -> Result<Self, EncodingError> {
        Self::build(self.plaintext_bits, self.slot_bits, self.params, self.mode, level)
    }

    fn headroom_bits(&self) -> u32 {
        match self.mode {
            PackingMode::Exact => 0,
            PackingMode::Approximate => self.params.scale_bits() * (self.level - 1),
        }
    }

    fn top_capacity_bits(&self) -> u32 {
        let below = self.slot_bits as usize * (self.slot_count - 1);
        (self.plaintext_bits as usize - 1 - self.headroom_bits() as usize - below).min(self.slot_bits as usize) as u32
    }

    /// Bits available to the contents of slot `i` before packing (values must be below `2^bits`).
    pub fn capacity_bits(&self, slot: usize) -> u32 {
        if slot + 1 == self.slot_count {
            self.top_capacity_bits()
        } else {
            self.slot_bits
        }
    }

    /// Smallest slot capacity in bits.
    pub fn min_capacity_bits(&self) -> u32 {
        self.top_capacity_bits()
    }

    /// Largest value a slot may hold after homomorphic evaluation, as a power-of-two exponent.
    /// Approximate layouts may spill `S^(level-1)` above the slot.
    pub fn result_capacity_bits(&self) -> u32 {
        self.min_capacity_bits() + self.headroom_bits()
    }

    /// Checks that slot results bounded by `bound` (strict upper bound) can be unpacked.
    pub fn check_bound(&self, bound: &BigUint) -> Result<(), EncodingError> {
        let cap = BigUint::one() << self.result_capacity_bits();
        if bound > &cap {
            return Err(EncodingError::CannotPack(format!(
                "slot bound of {} bits exceeds slot capacity 2^{}",
                bound.bits(),
                self.result_capacity_bits()
            )));
        }
        Ok(())
    }

    /// Number of plaintexts needed for `len` values.
    pub fn plaintexts_for(&self, len: usize) -> usize {
        len.div_ceil(self.slot_count)
    }

    /// Packs up to `slot_count` values.
    pub fn pack(&self, xs: &[BigUint]) -> Result<BigUint, EncodingError> {
        if xs.len() > self.slot_count {
            return Err(EncodingError::TooManyValues { got: xs.len(), slots: self.slot_count });
        }
        let mut acc = BigUint::zero();
        for (i, x) in xs.iter().enumerate().rev() {
            if x.bits() > u64::from(self.capacity_bits(i)) {
                return Err(EncodingError::SlotOverflow { slot: i });
            }
            acc <<= self.slot_bits;
            acc += x;
        }
        Ok(acc)
    }

    /// Packs an arbitrary-length list into consecutive plaintexts.
    pub fn pack_all(&self, xs: &[BigUint]) -> Result<Vec<BigUint>, EncodingError> {
        xs.chunks(self.slot_count).map(|c| self.pack(c)).collect()
    }

    /// Raw slot contents `floor(X / P^i) mod P`, plus the approximate-mode cleanup.
    pub fn unpack(&self, x: &BigUint) -> Vec<BigUint> {
        let mask = (BigUint::one() << self.slot_bits) - 1u32;
        let mut out = Vec::with_capacity(self.slot_count);
        let mut rest = x.clone();
        for _ in 0..self.slot_count {
            out.push(&rest & &mask);
            rest >>= self.slot_bits;
        }
        if self.mode == PackingMode::Approximate {
            let q_mask = self.params.slot_modulus() - 1u32;
            let low = self.headroom_bits();
            for v in out.iter_mut() {
                *v = (&*v & &q_mask) >> low << low;
            }
        }
        out
    }

    /// Slot contents reduced modulo `Q`.
    pub fn unpack_mod_q(&self, x: &BigUint) -> Vec<BigUint> {
        let q_mask = self.params.slot_modulus() - 1u32;
        self.unpack(x).into_iter().map(|v| v & &q_mask).collect()
    }

    /// Unpacks and decodes every slot at the layout's level.
    pub fn decode_slots(&self, x: &BigUint) -> Vec<f64> {
        let q = self.params.slot_modulus();
        self.unpack_mod_q(x)
            .iter()
            .map(|v| decode(v, self.params.scale_bits(), self.level, &q))
            .collect()
    }
}

impl fmt::Display for PackingLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P=2^{} Q=2^{} S=2^{} slots={} mode={} level={}",
            self.slot_bits,
            self.params.slot_mod_bits(),
            self.params.scale_bits(),
            self.slot_count,
            match self.mode {
                PackingMode::Exact => "exact",
                PackingMode::Approximate => "approximate",
            },
            self.level
        )
    }
}

/// One term `count * Q^q_pow * S^s_pow` of a closed-form bound on slot contents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundTerm {
    pub count: u64,
    pub q_pow: u32,
    pub s_pow: u32,
}

/// Upper bound on the fixed-point value of a polynomial when every input is at most `Q`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolynomialBound {
    terms: Vec<BoundTerm>,
}

impl PolynomialBound {
    pub fn new(terms: Vec<BoundTerm>) -> Result<Self, EncodingError> {
        if terms.iter().all(|t| t.count == 0) {
            return Err(EncodingError::InvalidParams("bound must be positive".into()));
        }
        Ok(PolynomialBound { terms })
    }

    /// From monomials `(coefficient magnitude, degree)` of a level-`max_degree` polynomial:
    /// a degree-`d` monomial is aligned by `S^(max_degree - d)`.
    pub fn from_monomials(max_degree: u32, monomials: &[(u64, u32)]) -> Result<Self, EncodingError> {
        let terms = monomials
            .iter()
            .map(|&(count, d)| BoundTerm { count, q_pow: d, s_pow: max_degree.saturating_sub(d) })
            .collect();
        Self::new(terms)
    }

    /// `count` products of `degree` inputs each.
    pub fn sum_of_products(count: u64, degree: u32) -> Self {
        PolynomialBound { terms: vec![BoundTerm { count, q_pow: degree, s_pow: 0 }] }
    }

    /// Bipartite SGD step: `(nk + n + m) Q^2 + m Q S`.
    pub fn bipartite_sgd(n: usize, k: usize, m: usize) -> Self {
        let (n, k, m) = (n as u64, k as u64, m as u64);
        PolynomialBound {
            terms: vec![
                BoundTerm { count: n * k + n + m, q_pow: 2, s_pow: 0 },
                BoundTerm { count: m, q_pow: 1, s_pow: 1 },
            ],
        }
    }

    /// Natural-order SGD step: `nk (3Q^3 + 2Q^2 S) + m Q^3`.
    pub fn natural_sgd(n: usize, k: usize, m: usize) -> Self {
        let (n, k, m) = (n as u64, k as u64, m as u64);
        PolynomialBound {
            terms: vec![
                BoundTerm { count: 3 * n * k + m, q_pow: 3, s_pow: 0 },
                BoundTerm { count: 2 * n * k, q_pow: 2, s_pow: 1 },
            ],
        }
    }

    pub fn eval(&self, params: &EncodingParams) -> BigUint {
        self.terms
            .iter()
            .map(|t| {
                BigUint::from(t.count) << (params.slot_mod_bits() * t.q_pow + params.scale_bits() * t.s_pow)
            })
            .sum()
    }
}

/// Exponent of the smallest `P` with `P >= f(Q, ..., Q)`. Inputs are strictly below `Q`,
/// so every slot result is strictly below `P`.
pub fn exact_slot_size(bound: &PolynomialBound, params: &EncodingParams) -> u32 {
    ceil_log2(&bound.eval(params)).max(params.slot_mod_bits())
}

/// Exponent of the smallest `P` with `S^(level-1) P >= f(Q, ..., Q)` and `Q | P`.
pub fn approx_slot_size(bound: &PolynomialBound, params: &EncodingParams, level: u32) -> u32 {
    let need = ceil_log2(&bound.eval(params)) as i64 - i64::from(params.scale_bits() * level.saturating_sub(1));
    need.max(i64::from(params.slot_mod_bits())) as u32
}

/// Rounds a slot exponent up to a multiple of `align` bits.
pub fn align_slot_bits(bits: u32, align: u32) -> u32 {
    bits.div_ceil(align) * align
}

/// Exact layout for slot results bounded by `bound`, with `P` aligned to `align` bits.
pub fn layout_for_bound(
    plaintext_bits: u32,
    bound: &PolynomialBound,
    params: EncodingParams,
    level: u32,
    align: u32,
) -> Result<PackingLayout, EncodingError> {
    let bits = align_slot_bits(exact_slot_size(bound, &params), align);
    let layout = PackingLayout::exact(plaintext_bits, bits, params, level)?;
    layout.check_bound(&bound.eval(&params))?;
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(s: u32, q: u32) -> EncodingParams {
        EncodingParams::new(s, q).unwrap()
    }

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn pack_examples() {
        let l = PackingLayout::exact(16, 4, params(1, 2), 1).unwrap();
        assert_eq!(l.slot_count(), 4);
        assert_eq!(l.pack(&[big(1), big(2), big(3)]).unwrap(), big(801));
        assert_eq!(l.unpack(&big(801))[..3], [big(1), big(2), big(3)]);
        assert_eq!(l.pack(&[big(9)]).unwrap(), big(9));
        assert!(l.unpack(&BigUint::zero()).iter().all(Zero::is_zero));
        assert_eq!(l.pack(&[big(16)]), Err(EncodingError::SlotOverflow { slot: 0 }));
        assert_eq!(
            l.pack(&vec![big(0); 5]),
            Err(EncodingError::TooManyValues { got: 5, slots: 4 })
        );
        // Top slot gets 16 - 1 - 12 = 3 bits.
        assert_eq!(l.capacity_bits(3), 3);
        assert!(l.pack(&[big(0), big(0), big(0), big(8)]).is_err());
        assert!(l.pack(&[big(0), big(0), big(0), big(7)]).is_ok());
    }

    #[test]
    fn slot_counts_at_2048() {
        let p80 = params(23, 80);
        let p56 = params(23, 56);
        assert_eq!(PackingLayout::exact(2048, 256, p80, 3).unwrap().slot_count(), 8);
        assert_eq!(PackingLayout::exact(2048, 128, p56, 2).unwrap().slot_count(), 16);
        let p55 = params(23, 55);
        assert_eq!(PackingLayout::exact(2048, 114, p55, 2).unwrap().slot_count(), 17);
        assert_eq!(PackingLayout::approximate(2048, 91, p55, 2).unwrap().slot_count(), 22);
    }

    #[test]
    fn packing_example_slot_sizes() {
        let p = params(23, 55);
        let f = PolynomialBound::sum_of_products(16, 2);
        assert_eq!(exact_slot_size(&f, &p), 114);
        assert_eq!(approx_slot_size(&f, &p, 2), 91);
    }

    #[test]
    fn sgd_bounds() {
        let p = params(23, 56);
        let b = PolynomialBound::bipartite_sgd(8, 8, 10).eval(&p);
        let expect = BigUint::from(82u32) * (BigUint::one() << 112u32) + BigUint::from(10u32) * (BigUint::one() << 79u32);
        assert_eq!(b, expect);
        let p = params(23, 80);
        let b = PolynomialBound::natural_sgd(8, 8, 10).eval(&p);
        let expect = BigUint::from(64u32)
            * (BigUint::from(3u32) * (BigUint::one() << 240u32) + BigUint::from(2u32) * (BigUint::one() << 183u32))
            + BigUint::from(10u32) * (BigUint::one() << 240u32);
        assert_eq!(b, expect);
        let l = layout_for_bound(2048, &PolynomialBound::natural_sgd(8, 8, 10), p, 3, 32).unwrap();
        assert_eq!(l.slot_bits(), 256);
        let l = layout_for_bound(2048, &PolynomialBound::bipartite_sgd(8, 8, 10), params(23, 56), 2, 32).unwrap();
        assert_eq!(l.slot_bits(), 128);
    }

    #[test]
    fn cannot_pack() {
        let p = params(23, 80);
        assert!(matches!(PackingLayout::exact(64, 128, params(23, 56), 1), Err(EncodingError::CannotPack(_))));
        assert!(layout_for_bound(128, &PolynomialBound::natural_sgd(8, 8, 10), p, 3, 32).is_err());
    }

    #[test]
    fn approximate_unpack_discards_low_bits() {
        let p = params(4, 12);
        let l = PackingLayout::approximate(64, 16, p, 2).unwrap();
        let x = l.pack(&[big(0x0abc), big(0x0123)]).unwrap();
        let u = l.unpack(&x);
        assert_eq!(u[0], big(0x0ab0));
        assert_eq!(u[1], big(0x0120));
    }

    #[test]
    fn display_record() {
        let l = PackingLayout::exact(2048, 256, params(23, 80), 3).unwrap();
        assert_eq!(l.to_string(), "P=2^256 Q=2^80 S=2^23 slots=8 mode=exact level=3");
    }

    #[test]
    fn align() {
        assert_eq!(align_slot_bits(114, 32), 128);
        assert_eq!(align_slot_bits(128, 32), 128);
        assert_eq!(align_slot_bits(248, 32), 256);
    }
}
