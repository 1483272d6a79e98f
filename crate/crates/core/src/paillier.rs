//! Paillier encryption with generator `n + 1`.
//!
//! Plaintexts live in `Z_n`, ciphertexts in `Z*_{n^2}`. The key holder can
//! encrypt and decrypt through the CRT, which is roughly twice as fast as the
//! public-key path.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::OnceLock;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::error::CryptoError;

/// Miller-Rabin rounds used for prime generation; false-positive rate below 2^-80.
pub const MR_ROUNDS: usize = 40;

fn small_primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        let limit = 4096usize;
        let mut sieve = vec![true; limit];
        sieve[0] = false;
        sieve[1] = false;
        let mut i = 2;
        while i * i < limit {
            if sieve[i] {
                let mut j = i * i;
                while j < limit {
                    sieve[j] = false;
                    j += i;
                }
            }
            i += 1;
        }
        (0..limit).filter(|&i| sieve[i]).map(|i| i as u32).collect()
    })
}

/// Probabilistic primality test: trial division followed by `rounds` Miller-Rabin rounds
/// with random bases.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in small_primes() {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n_minus_1 {
                continue 'witness;
            }
            if x.is_one() {
                return false;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits and the two top bits set, so that the
/// product of two such primes has exactly `2 * bits` bits.
pub fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 16);
    loop {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MR_ROUNDS, rng) {
            return candidate;
        }
    }
}

fn fingerprint(n: &BigUint) -> u64 {
    let mut h = DefaultHasher::new();
    n.to_bytes_be().hash(&mut h);
    h.finish()
}

/// Paillier public key.
#[derive(Clone, Debug)]
pub struct PublicKey {
    key_bits: u32,
    n: BigUint,
    n_squared: BigUint,
    tag: u64,
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
    }
}

impl Eq for PublicKey {}

/// Paillier ciphertext. Carries a fingerprint of the key it was produced under.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    key_tag: u64,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }
}

impl PublicKey {
    pub fn from_modulus(n: BigUint, key_bits: u32) -> Result<Self, CryptoError> {
        check_key_bits(key_bits)?;
        if n.bits() != u64::from(key_bits) || n.is_even() {
            return Err(CryptoError::KeyFile(format!(
                "modulus has {} bits, expected {key_bits}",
                n.bits()
            )));
        }
        let n_squared = &n * &n;
        let tag = fingerprint(&n);
        Ok(PublicKey { key_bits, n, n_squared, tag })
    }

    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    /// Width in bytes of a serialized ciphertext.
    pub fn ciphertext_bytes(&self) -> usize {
        2 * self.key_bits as usize / 8
    }

    fn check(&self, c: &Ciphertext) -> Result<(), CryptoError> {
        if c.key_tag != self.tag {
            return Err(CryptoError::KeyMismatch);
        }
        Ok(())
    }

    fn wrap(&self, value: BigUint) -> Ciphertext {
        Ciphertext { value, key_tag: self.tag }
    }

    /// Uniform element of `Z*_n`.
    pub fn random_unit<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// `(1 + x n) mod n^2`, the deterministic part of an encryption.
    fn g_pow(&self, x: &BigUint) -> BigUint {
        (BigUint::one() + x * &self.n) % &self.n_squared
    }

    /// Encrypts `x` with explicit randomness `r`.
    pub fn encrypt_with(&self, x: &BigUint, r: &BigUint) -> Result<Ciphertext, CryptoError> {
        if x >= &self.n {
            return Err(CryptoError::PlaintextRange);
        }
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(self.wrap(self.g_pow(x) * rn % &self.n_squared))
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, x: &BigUint, rng: &mut R) -> Result<Ciphertext, CryptoError> {
        let r = self.random_unit(rng);
        self.encrypt_with(x, &r)
    }

    /// Encrypts a batch. Randomness is drawn sequentially so results do not
    /// depend on thread scheduling.
    pub fn encrypt_batch<R: RngCore + ?Sized>(
        &self,
        xs: &[BigUint],
        rng: &mut R,
    ) -> Result<Vec<Ciphertext>, CryptoError> {
        let rs: Vec<BigUint> = xs.iter().map(|_| self.random_unit(rng)).collect();
        xs.par_iter().zip(rs.par_iter()).map(|(x, r)| self.encrypt_with(x, r)).collect()
    }

    /// Homomorphic addition: `Dec(hom_add(c1, c2)) = x1 + x2 mod n`.
    pub fn hom_add(&self, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.check(c1)?;
        self.check(c2)?;
        Ok(self.wrap(&c1.value * &c2.value % &self.n_squared))
    }

    /// Adds a public plaintext without fresh randomness.
    pub fn add_plain(&self, c: &Ciphertext, x: &BigUint) -> Result<Ciphertext, CryptoError> {
        self.check(c)?;
        if x >= &self.n {
            return Err(CryptoError::PlaintextRange);
        }
        Ok(self.wrap(&c.value * self.g_pow(x) % &self.n_squared))
    }

    /// Plaintext-ciphertext multiplication: `Dec(ct_pt_mul(c, k)) = k x mod n`.
    pub fn ct_pt_mul(&self, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext, CryptoError> {
        self.check(c)?;
        if k >= &self.n {
            return Err(CryptoError::PlaintextRange);
        }
        if k.is_zero() {
            return Ok(self.wrap(BigUint::one()));
        }
        // A large k is the negation of a small one; invert and use the short exponent.
        let half = &self.n >> 1;
        if k > &half {
            let inv = c.value.modinv(&self.n_squared).ok_or(CryptoError::MalformedCiphertext)?;
            let e = &self.n - k;
            return Ok(self.wrap(inv.modpow(&e, &self.n_squared)));
        }
        Ok(self.wrap(c.value.modpow(k, &self.n_squared)))
    }

    /// Fresh randomness on an existing ciphertext, same plaintext.
    pub fn rerandomize<R: RngCore + ?Sized>(&self, c: &Ciphertext, rng: &mut R) -> Result<Ciphertext, CryptoError> {
        self.check(c)?;
        let r = self.random_unit(rng);
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(self.wrap(&c.value * rn % &self.n_squared))
    }

    /// Re-randomizes a batch; randomness drawn sequentially.
    pub fn rerandomize_batch<R: RngCore + ?Sized>(
        &self,
        cs: &[Ciphertext],
        rng: &mut R,
    ) -> Result<Vec<Ciphertext>, CryptoError> {
        for c in cs {
            self.check(c)?;
        }
        let rs: Vec<BigUint> = cs.iter().map(|_| self.random_unit(rng)).collect();
        Ok(cs
            .par_iter()
            .zip(rs.par_iter())
            .map(|(c, r)| self.wrap(&c.value * r.modpow(&self.n, &self.n_squared) % &self.n_squared))
            .collect())
    }

    /// The neutral ciphertext `Enc(0; 1)`.
    pub fn zero_ciphertext(&self) -> Ciphertext {
        self.wrap(BigUint::one())
    }

    /// Fixed-width big-endian serialization.
    pub fn serialize(&self, c: &Ciphertext) -> Result<Vec<u8>, CryptoError> {
        self.check(c)?;
        let width = self.ciphertext_bytes();
        let raw = c.value.to_bytes_be();
        let mut out = vec![0u8; width - raw.len()];
        out.extend_from_slice(&raw);
        Ok(out)
    }

    pub fn deserialize(&self, bytes: &[u8]) -> Result<Ciphertext, CryptoError> {
        let width = self.ciphertext_bytes();
        if bytes.len() != width {
            return Err(CryptoError::BadCiphertextLength { expected: width, got: bytes.len() });
        }
        let value = BigUint::from_bytes_be(bytes);
        if value.is_zero() || value >= self.n_squared {
            return Err(CryptoError::MalformedCiphertext);
        }
        Ok(self.wrap(value))
    }

    /// Random element of `Z_n`, used for masks.
    pub fn random_plaintext<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        rng.gen_biguint_below(&self.n)
    }
}

fn check_key_bits(key_bits: u32) -> Result<(), CryptoError> {
    if key_bits < 64 || !key_bits.is_multiple_of(16) {
        return Err(CryptoError::UnsupportedKeySize(key_bits));
    }
    Ok(())
}

/// Paillier secret key with CRT precomputation.
#[derive(Clone, Debug)]
pub struct SecretKey {
    public: PublicKey,
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    p_minus_1: BigUint,
    q_minus_1: BigUint,
    hp: BigUint,
    hq: BigUint,
    p_inv_q: BigUint,
    p_sq_inv_q_sq: BigUint,
    q_mod_p_minus_1: BigUint,
    p_mod_q_minus_1: BigUint,
}

impl SecretKey {
    pub fn from_primes(p: BigUint, q: BigUint, key_bits: u32) -> Result<Self, CryptoError> {
        if p == q {
            return Err(CryptoError::KeyFile("p and q must differ".into()));
        }
        let n = &p * &q;
        let public = PublicKey::from_modulus(n, key_bits)?;
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let p_minus_1 = &p - 1u32;
        let q_minus_1 = &q - 1u32;
        let g = public.n() + 1u32;
        let lp = (g.modpow(&p_minus_1, &p_squared) - 1u32) / &p;
        let lq = (g.modpow(&q_minus_1, &q_squared) - 1u32) / &q;
        let bad = || CryptoError::KeyFile("p, q do not form a valid key".into());
        let hp = (lp % &p).modinv(&p).ok_or_else(bad)?;
        let hq = (lq % &q).modinv(&q).ok_or_else(bad)?;
        let p_inv_q = (&p % &q).modinv(&q).ok_or_else(bad)?;
        let p_sq_inv_q_sq = (&p_squared % &q_squared).modinv(&q_squared).ok_or_else(bad)?;
        let q_mod_p_minus_1 = &q % &p_minus_1;
        let p_mod_q_minus_1 = &p % &q_minus_1;
        Ok(SecretKey {
            public,
            p,
            q,
            p_squared,
            q_squared,
            p_minus_1,
            q_minus_1,
            hp,
            hq,
            p_inv_q,
            p_sq_inv_q_sq,
            q_mod_p_minus_1,
            p_mod_q_minus_1,
        })
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn primes(&self) -> (&BigUint, &BigUint) {
        (&self.p, &self.q)
    }

    /// `lcm(p-1, q-1)`.
    pub fn lambda(&self) -> BigUint {
        self.p_minus_1.lcm(&self.q_minus_1)
    }

    /// `r^n mod n^2` through the CRT. Modulo `p^2`, `x^p` only depends on
    /// `x mod p`, so `r^n = (r^q mod p)^p` and both exponents stay half-size.
    fn rn(&self, r: &BigUint) -> BigUint {
        let a = (r % &self.p).modpow(&self.q_mod_p_minus_1, &self.p).modpow(&self.p, &self.p_squared);
        let b = (r % &self.q).modpow(&self.p_mod_q_minus_1, &self.q).modpow(&self.q, &self.q_squared);
        let a_mod_q2 = &a % &self.q_squared;
        let diff = if b >= a_mod_q2 { b - a_mod_q2 } else { &self.q_squared - (a_mod_q2 - b) };
        a + &self.p_squared * (diff * &self.p_sq_inv_q_sq % &self.q_squared)
    }

    pub fn encrypt_with(&self, x: &BigUint, r: &BigUint) -> Result<Ciphertext, CryptoError> {
        if x >= self.public.n() {
            return Err(CryptoError::PlaintextRange);
        }
        let pk = &self.public;
        Ok(pk.wrap(pk.g_pow(x) * self.rn(r) % pk.n_squared()))
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, x: &BigUint, rng: &mut R) -> Result<Ciphertext, CryptoError> {
        let r = self.public.random_unit(rng);
        self.encrypt_with(x, &r)
    }

    pub fn encrypt_batch<R: RngCore + ?Sized>(
        &self,
        xs: &[BigUint],
        rng: &mut R,
    ) -> Result<Vec<Ciphertext>, CryptoError> {
        let rs: Vec<BigUint> = xs.iter().map(|_| self.public.random_unit(rng)).collect();
        xs.par_iter().zip(rs.par_iter()).map(|(x, r)| self.encrypt_with(x, r)).collect()
    }

    /// Re-randomization through the CRT.
    pub fn rerandomize<R: RngCore + ?Sized>(&self, c: &Ciphertext, rng: &mut R) -> Result<Ciphertext, CryptoError> {
        let pk = &self.public;
        pk.check(c)?;
        let r = pk.random_unit(rng);
        Ok(pk.wrap(&c.value * self.rn(&r) % pk.n_squared()))
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, CryptoError> {
        let pk = &self.public;
        pk.check(c)?;
        if c.value.is_zero() || &c.value >= pk.n_squared() || !c.value.gcd(pk.n()).is_one() {
            return Err(CryptoError::MalformedCiphertext);
        }
        let cp = c.value.modpow(&self.p_minus_1, &self.p_squared);
        let cq = c.value.modpow(&self.q_minus_1, &self.q_squared);
        let mp = ((cp - 1u32) / &self.p) * &self.hp % &self.p;
        let mq = ((cq - 1u32) / &self.q) * &self.hq % &self.q;
        let diff = if mq >= mp { &mq - &mp } else { &self.q - ((&mp - &mq) % &self.q) };
        let h = diff * &self.p_inv_q % &self.q;
        Ok(mp + &self.p * h)
    }

    pub fn decrypt_batch(&self, cs: &[Ciphertext]) -> Result<Vec<BigUint>, CryptoError> {
        cs.par_iter().map(|c| self.decrypt(c)).collect()
    }
}

/// Generates a key pair whose modulus has exactly `key_bits` bits.
pub fn keygen<R: RngCore + ?Sized>(key_bits: u32, rng: &mut R) -> Result<(PublicKey, SecretKey), CryptoError> {
    check_key_bits(key_bits)?;
    let half = u64::from(key_bits / 2);
    loop {
        let p = random_prime(half, rng);
        let q = random_prime(half, rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if n.bits() != u64::from(key_bits) || !n.gcd(&phi).is_one() {
            continue;
        }
        let sk = SecretKey::from_primes(p, q, key_bits)?;
        return Ok((sk.public().clone(), sk));
    }
}

/// Deterministic key generation from a seed.
pub fn keygen_seeded(key_bits: u32, seed: u64) -> Result<(PublicKey, SecretKey), CryptoError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    keygen(key_bits, &mut rng)
}

const KEY_HEADER: &str = "# paillier key v1";

fn hex(x: &BigUint) -> String {
    x.to_str_radix(16)
}

fn parse_key_fields(text: &str) -> Result<std::collections::HashMap<String, String>, CryptoError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(KEY_HEADER) {
        return Err(CryptoError::KeyFile("missing header".into()));
    }
    let mut out = std::collections::HashMap::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| CryptoError::KeyFile(format!("bad line `{line}`")))?;
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn field<'a>(f: &'a std::collections::HashMap<String, String>, name: &str) -> Result<&'a str, CryptoError> {
    f.get(name).map(String::as_str).ok_or_else(|| CryptoError::KeyFile(format!("missing field `{name}`")))
}

fn parse_hex(s: &str) -> Result<BigUint, CryptoError> {
    BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| CryptoError::KeyFile(format!("bad hex `{s}`")))
}

impl PublicKey {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{KEY_HEADER}");
        let _ = writeln!(s, "kind public");
        let _ = writeln!(s, "key_bits {}", self.key_bits);
        let _ = writeln!(s, "n {}", hex(&self.n));
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CryptoError> {
        let f = parse_key_fields(text)?;
        let bits: u32 = field(&f, "key_bits")?
            .parse()
            .map_err(|_| CryptoError::KeyFile("bad key_bits".into()))?;
        PublicKey::from_modulus(parse_hex(field(&f, "n")?)?, bits)
    }

    pub fn save(&self, path: &Path) -> Result<(), CryptoError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CryptoError> {
        PublicKey::from_text(&fs::read_to_string(path)?)
    }
}

impl SecretKey {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{KEY_HEADER}");
        let _ = writeln!(s, "kind secret");
        let _ = writeln!(s, "key_bits {}", self.public.key_bits);
        let _ = writeln!(s, "n {}", hex(self.public.n()));
        let _ = writeln!(s, "p {}", hex(&self.p));
        let _ = writeln!(s, "q {}", hex(&self.q));
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CryptoError> {
        let f = parse_key_fields(text)?;
        if field(&f, "kind")? != "secret" {
            return Err(CryptoError::KeyFile("not a secret key".into()));
        }
        let bits: u32 = field(&f, "key_bits")?
            .parse()
            .map_err(|_| CryptoError::KeyFile("bad key_bits".into()))?;
        let sk = SecretKey::from_primes(parse_hex(field(&f, "p")?)?, parse_hex(field(&f, "q")?)?, bits)?;
        if sk.public.n() != &parse_hex(field(&f, "n")?)? {
            return Err(CryptoError::KeyFile("n does not equal p*q".into()));
        }
        Ok(sk)
    }

    pub fn save(&self, path: &Path) -> Result<(), CryptoError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CryptoError> {
        SecretKey::from_text(&fs::read_to_string(path)?)
    }
}

/// Uniform draw from `[0, bound)`; thin wrapper kept for call sites that take a generic RNG.
pub fn uniform_below<R: Rng + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    rng.gen_biguint_below(bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn key512() -> (PublicKey, SecretKey) {
        keygen_seeded(512, 7).unwrap()
    }

    #[test]
    fn modulus_has_exact_bit_length() {
        for bits in [64u32, 128, 256, 512] {
            let (pk, sk) = keygen_seeded(bits, u64::from(bits)).unwrap();
            assert_eq!(pk.n().bits(), u64::from(bits));
            let (p, q) = sk.primes();
            assert_ne!(p, q);
            assert_eq!(p.bits(), q.bits());
        }
    }

    #[test]
    fn rejects_odd_key_sizes() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(matches!(keygen(100, &mut rng), Err(CryptoError::UnsupportedKeySize(100))));
        assert!(matches!(keygen(32, &mut rng), Err(CryptoError::UnsupportedKeySize(32))));
    }

    #[test]
    fn primality_on_known_values() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        // 2^127 - 1 is prime, 2^128 + 1 is not.
        let m127 = (BigUint::one() << 127u32) - 1u32;
        assert!(is_probable_prime(&m127, MR_ROUNDS, &mut rng));
        let f7 = (BigUint::one() << 128u32) + 1u32;
        assert!(!is_probable_prime(&f7, MR_ROUNDS, &mut rng));
        // Carmichael number 561.
        assert!(!is_probable_prime(&BigUint::from(561u32), MR_ROUNDS, &mut rng));
    }

    #[test]
    fn encrypt_decrypt_examples() {
        let (pk, sk) = key512();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let c5 = pk.encrypt(&BigUint::from(5u32), &mut rng).unwrap();
        let c7 = pk.encrypt(&BigUint::from(7u32), &mut rng).unwrap();
        assert_eq!(sk.decrypt(&pk.hom_add(&c5, &c7).unwrap()).unwrap(), BigUint::from(12u32));
        assert_eq!(sk.decrypt(&pk.ct_pt_mul(&c5, &BigUint::from(3u32)).unwrap()).unwrap(), BigUint::from(15u32));
        let n1 = pk.n() - 1u32;
        let c = pk.encrypt(&n1, &mut rng).unwrap();
        let one = pk.encrypt(&BigUint::one(), &mut rng).unwrap();
        assert_eq!(sk.decrypt(&pk.hom_add(&c, &one).unwrap()).unwrap(), BigUint::zero());
    }

    #[test]
    fn crt_decryption_matches_textbook() {
        let (pk, sk) = key512();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let lambda = sk.lambda();
        let n = pk.n();
        let l = |u: BigUint| (u - 1u32) / n;
        let mu = l((n + 1u32).modpow(&lambda, pk.n_squared())).modinv(n).unwrap();
        for _ in 0..20 {
            let x = rng.gen_biguint_below(n);
            let c = pk.encrypt(&x, &mut rng).unwrap();
            let textbook = l(c.value().modpow(&lambda, pk.n_squared())) * &mu % n;
            assert_eq!(sk.decrypt(&c).unwrap(), textbook);
            assert_eq!(textbook, x);
        }
    }

    #[test]
    fn secret_key_encryption_matches_public() {
        let (pk, sk) = key512();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = rng.gen_biguint_below(pk.n());
            let r = pk.random_unit(&mut rng);
            assert_eq!(sk.encrypt_with(&x, &r).unwrap(), pk.encrypt_with(&x, &r).unwrap());
        }
    }

    #[test]
    fn negative_scalar_path() {
        let (pk, sk) = key512();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let c = pk.encrypt(&BigUint::from(9u32), &mut rng).unwrap();
        let minus_two = pk.n() - 2u32;
        assert_eq!(sk.decrypt(&pk.ct_pt_mul(&c, &minus_two).unwrap()).unwrap(), pk.n() - 18u32);
        assert_eq!(sk.decrypt(&pk.ct_pt_mul(&c, &BigUint::zero()).unwrap()).unwrap(), BigUint::zero());
    }

    #[test]
    fn errors() {
        let (pk, sk) = key512();
        let (pk2, _) = keygen_seeded(512, 99).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        assert!(matches!(pk.encrypt(pk.n(), &mut rng), Err(CryptoError::PlaintextRange)));
        let a = pk.encrypt(&BigUint::one(), &mut rng).unwrap();
        let b = pk2.encrypt(&BigUint::one(), &mut rng).unwrap();
        assert!(matches!(pk.hom_add(&a, &b), Err(CryptoError::KeyMismatch)));
        assert!(matches!(sk.decrypt(&b), Err(CryptoError::KeyMismatch)));
        assert!(matches!(pk.ct_pt_mul(&a, pk.n()), Err(CryptoError::PlaintextRange)));
        // A multiple of p is not a unit mod n^2.
        let bad = pk.wrap(sk.primes().0.clone());
        assert!(matches!(sk.decrypt(&bad), Err(CryptoError::MalformedCiphertext)));
        assert!(matches!(pk.deserialize(&[1u8; 3]), Err(CryptoError::BadCiphertextLength { .. })));
        assert!(matches!(pk.deserialize(&[0xffu8; 128]), Err(CryptoError::MalformedCiphertext)));
    }

    #[test]
    fn rerandomize_changes_ciphertext_not_plaintext() {
        let (pk, sk) = key512();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let c = pk.encrypt(&BigUint::from(42u32), &mut rng).unwrap();
        let c2 = pk.rerandomize(&c, &mut rng).unwrap();
        assert_ne!(c, c2);
        assert_eq!(sk.decrypt(&c2).unwrap(), BigUint::from(42u32));
    }

    #[test]
    fn serialization_round_trip_and_width() {
        let (pk, _) = key512();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let c = pk.encrypt(&BigUint::from(3u32), &mut rng).unwrap();
        let bytes = pk.serialize(&c).unwrap();
        assert_eq!(bytes.len(), 128);
        assert_eq!(pk.deserialize(&bytes).unwrap(), c);
    }

    #[test]
    fn key_text_round_trip() {
        let (pk, sk) = key512();
        let sk2 = SecretKey::from_text(&sk.to_text()).unwrap();
        assert_eq!(sk2.public(), &pk);
        let pk2 = PublicKey::from_text(&pk.to_text()).unwrap();
        assert_eq!(pk2, pk);
        assert!(SecretKey::from_text(&pk.to_text()).is_err());
        assert!(PublicKey::from_text("garbage").is_err());
    }

    #[test]
    fn batch_matches_sequential_under_same_seed() {
        let (pk, sk) = key512();
        let xs: Vec<BigUint> = (0..6u32).map(BigUint::from).collect();
        let a = pk.encrypt_batch(&xs, &mut ChaCha20Rng::seed_from_u64(11)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let rs: Vec<BigUint> = xs.iter().map(|_| pk.random_unit(&mut rng)).collect();
        for ((x, r), c) in xs.iter().zip(&rs).zip(&a) {
            assert_eq!(&pk.encrypt_with(x, r).unwrap(), c);
        }
        assert_eq!(sk.decrypt_batch(&a).unwrap(), xs);
    }
}
