//! Fixed-point encoding of reals into `Z_M` for a power-of-two scale `S`.
//!
//! A value at level `l` carries the scale `S^l`. Products add levels; sums
//! align to the larger level.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{ToPrimitive, Zero};

use crate::error::EncodingError;

/// Scale and slot modulus, both powers of two, stored as exponents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodingParams {
    scale_bits: u32,
    slot_mod_bits: u32,
}

impl EncodingParams {
    /// `S = 2^scale_bits`, `Q = 2^slot_mod_bits`; requires `S >= 2` and `Q >= 2S`.
    pub fn new(scale_bits: u32, slot_mod_bits: u32) -> Result<Self, EncodingError> {
        if scale_bits == 0 {
            return Err(EncodingError::InvalidParams("scale must be at least 2".into()));
        }
        if slot_mod_bits < scale_bits + 1 {
            return Err(EncodingError::InvalidParams(format!(
                "slot modulus 2^{slot_mod_bits} is smaller than 2S = 2^{}",
                scale_bits + 1
            )));
        }
        Ok(EncodingParams { scale_bits, slot_mod_bits })
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn slot_mod_bits(&self) -> u32 {
        self.slot_mod_bits
    }

    pub fn scale(&self) -> BigUint {
        BigUint::from(1u32) << self.scale_bits
    }

    /// `S^level`.
    pub fn scale_pow(&self, level: u32) -> BigUint {
        BigUint::from(1u32) << (self.scale_bits * level)
    }

    pub fn slot_modulus(&self) -> BigUint {
        BigUint::from(1u32) << self.slot_mod_bits
    }

    /// Largest magnitude representable at `level` modulo `Q`.
    pub fn max_abs(&self, level: u32) -> f64 {
        ldexp(1.0, self.slot_mod_bits as i64 - 1 - i64::from(self.scale_bits * level))
    }
}

fn ldexp(x: f64, e: i64) -> f64 {
    let mut x = x;
    let mut e = e;
    while e > 1000 {
        x *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= 2f64.powi(-1000);
        e += 1000;
    }
    x * 2f64.powi(e as i32)
}

/// Splits a finite non-negative float into `m * 2^e` with integer `m`.
fn decompose(x: f64) -> (u64, i64) {
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp - 1075)
    }
}

/// `floor(x * 2^shift)` and `round_half_even(x * 2^shift)` for finite `x >= 0`, exactly.
fn scaled(x: f64, shift: u32) -> (BigUint, BigUint) {
    let (m, e) = decompose(x);
    let m = BigUint::from(m);
    let total = e + i64::from(shift);
    if total >= 0 {
        let v = m << total as u64;
        return (v.clone(), v);
    }
    let down = (-total) as u64;
    let floor = &m >> down;
    let rem = &m - (&floor << down);
    let half = BigUint::from(1u32) << (down - 1);
    let round = if rem > half || (rem == half && floor.bit(0)) { &floor + 1u32 } else { floor.clone() };
    (floor, round)
}

/// Encodes `x` at `level` into `Z_modulus`: `round(x S^l)`, negatives as `modulus - round(|x| S^l)`.
pub fn encode_at(x: f64, scale_bits: u32, level: u32, modulus: &BigUint) -> Result<BigUint, EncodingError> {
    if !x.is_finite() {
        return Err(EncodingError::NotFinite);
    }
    let shift = scale_bits * level;
    let (twice_floor, _) = scaled(x.abs(), shift + 1);
    if &twice_floor >= modulus {
        return Err(EncodingError::Overflow { value: x, level });
    }
    let (_, t) = scaled(x.abs(), shift);
    if t.is_zero() {
        return Ok(t);
    }
    if (&t << 1u32) >= *modulus {
        // Rounding landed on modulus/2, which would decode with the wrong sign.
        return Err(EncodingError::Overflow { value: x, level });
    }
    if x < 0.0 {
        Ok(modulus - t)
    } else {
        Ok(t)
    }
}

/// Level-1 encoding.
pub fn encode(x: f64, params: &EncodingParams, modulus: &BigUint) -> Result<BigUint, EncodingError> {
    encode_at(x, params.scale_bits, 1, modulus)
}

/// Decodes `v` in `[0, modulus)` at `level`.
pub fn decode(v: &BigUint, scale_bits: u32, level: u32, modulus: &BigUint) -> f64 {
    let signed = to_signed(v, modulus);
    bigint_to_f64_scaled(&signed, -i64::from(scale_bits * level))
}

/// `x * 2^e` as a float, accurate for arbitrarily large `x`.
pub fn bigint_to_f64_scaled(x: &BigInt, e: i64) -> f64 {
    let bits = x.bits();
    if bits > 900 {
        let drop = bits - 900;
        let top: BigInt = x >> drop;
        return ldexp(top.to_f64().unwrap_or(0.0), e + drop as i64);
    }
    ldexp(x.to_f64().unwrap_or(0.0), e)
}

/// Symmetric representative: values at or above `modulus/2` are negative.
pub fn to_signed(v: &BigUint, modulus: &BigUint) -> BigInt {
    let v = v % modulus;
    if (&v << 1u32) < *modulus {
        BigInt::from_biguint(Sign::Plus, v)
    } else {
        -BigInt::from_biguint(Sign::Plus, modulus - v)
    }
}

/// Reduces a signed integer into `[0, modulus)`.
pub fn from_signed(v: &BigInt, modulus: &BigUint) -> BigUint {
    let m = BigInt::from_biguint(Sign::Plus, modulus.clone());
    let r = ((v % &m) + &m) % &m;
    r.to_biguint().expect("non-negative after reduction")
}

/// Additive inverse in `Z_modulus`.
pub fn neg_mod(v: &BigUint, modulus: &BigUint) -> BigUint {
    let v = v % modulus;
    if v.is_zero() {
        v
    } else {
        modulus - v
    }
}

/// Smallest exponent `b` with `2^b >= x`; `x` must be positive.
pub fn ceil_log2(x: &BigUint) -> u32 {
    assert!(!x.is_zero(), "ceil_log2 of zero");
    let bits = x.bits() as u32;
    if x.trailing_zeros() == Some(u64::from(bits - 1)) {
        bits - 1
    } else {
        bits
    }
}

/// Exponent of the slot modulus for a degree-`d` result of magnitude at most `value_bound`:
/// the smallest power of two at least `2 S^d B`, and never below `2S`.
pub fn slot_modulus(scale_bits: u32, degree: u32, value_bound: f64) -> Result<u32, EncodingError> {
    if degree == 0 || !value_bound.is_finite() || value_bound <= 0.0 {
        return Err(EncodingError::InvalidParams("degree must be >= 1 and bound positive".into()));
    }
    let log_b = value_bound.log2().ceil() as i64;
    let bits = 1 + i64::from(scale_bits) * i64::from(degree) + log_b;
    Ok((bits.max(i64::from(scale_bits) + 1)) as u32)
}
