//! Social-regularized matrix factorization and its secure training steps.
//!
//! Gradients follow the convention `grad = 2 * (half-gradient)`, with
//!
//! ```text
//! e_i          = w_i (u . v_i - r_i)
//! grad_u / 2   = sum_i e_i v_i + (lambda_s / m) sum_j (u - f_j)
//! grad_v_i / 2 = e_i u
//! ```
//!
//! L2 regularization is applied by the caller as multiplicative shrinkage.

mod aggregate;
mod bipartite;
mod infer;
mod model;
mod natural;
pub mod train;

pub use aggregate::{aggregate_item_gradients, Contribution, GradientAggregator, SharedAggregator, ThresholdPool};
pub use bipartite::secure_sgd_bipartite;
pub use infer::{secure_infer, InferMode};
pub use model::SoRegModel;
pub use natural::secure_sgd_natural;

use num_bigint::BigUint;
use rand::RngCore;

use crate::circuit::VarKey;
use crate::encoding::{encode_at, EncodingParams};
use crate::error::{EncodingError, ProtocolError};
use crate::packing::{layout_for_bound, PackingLayout, PolynomialBound};
use crate::paillier::{Ciphertext, PublicKey, SecretKey};
use crate::protocol::{Session, StoredValue};
use crate::transport::Transport;

/// Slot modulus exponent for level-3 natural-order gradients (|grad/2| < 2^10).
pub const NATURAL_SLOT_MOD_BITS: u32 = 80;
/// Slot modulus exponent for level-2 bipartite gradients (|grad/2| < 2^9).
pub const BIPARTITE_SLOT_MOD_BITS: u32 = 56;
/// Slot sizes are rounded up to a multiple of this many bits.
pub const SLOT_ALIGN_BITS: u32 = 32;

/// Per-step data in the clear, for the reference implementation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepBatch {
    pub ratings: Vec<f64>,
    pub weights: Vec<f64>,
    pub friends: Vec<Vec<f64>>,
}

/// Full gradients (already doubled).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub user: Vec<f64>,
    pub items: Vec<Vec<f64>>,
}

fn check_shapes(user: &[f64], items: &[Vec<f64>], ratings: &[f64], weights: &[f64]) -> Result<(), ProtocolError> {
    let k = user.len();
    if k == 0 {
        return Err(ProtocolError::InvalidInput("embedding dimension must be at least 1".into()));
    }
    if items.iter().any(|v| v.len() != k) {
        return Err(ProtocolError::InvalidInput("item embedding length differs from user".into()));
    }
    if ratings.len() != items.len() || weights.len() != items.len() {
        return Err(ProtocolError::InvalidInput("one rating and weight per item".into()));
    }
    let all = user.iter().chain(items.iter().flatten()).chain(ratings).chain(weights);
    if all.into_iter().any(|x| !x.is_finite()) {
        return Err(ProtocolError::InvalidInput("non-finite input".into()));
    }
    Ok(())
}

/// Reference gradient computation.
pub fn plaintext_sgd_step(
    user: &[f64],
    items: &[Vec<f64>],
    batch: &StepBatch,
    lambda_s: f64,
) -> Result<Gradients, ProtocolError> {
    check_shapes(user, items, &batch.ratings, &batch.weights)?;
    let k = user.len();
    if batch.friends.iter().any(|f| f.len() != k) {
        return Err(ProtocolError::InvalidInput("friend embedding length differs from user".into()));
    }
    let mut gu = vec![0.0; k];
    let mut gv = Vec::with_capacity(items.len());
    for ((v, r), w) in items.iter().zip(&batch.ratings).zip(&batch.weights) {
        let dot: f64 = user.iter().zip(v).map(|(a, b)| a * b).sum();
        let e = w * (dot - r);
        for p in 0..k {
            gu[p] += e * v[p];
        }
        gv.push(user.iter().map(|u| 2.0 * e * u).collect());
    }
    let m = batch.friends.len();
    if m > 0 {
        let c = lambda_s / m as f64;
        for f in &batch.friends {
            for p in 0..k {
                gu[p] += c * (user[p] - f[p]);
            }
        }
    }
    Ok(Gradients { user: gu.into_iter().map(|g| 2.0 * g).collect(), items: gv })
}

/// Layout and social weight for one secure step.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    /// Layout of result slots; its level is the result level of the step.
    pub layout: PackingLayout,
    /// Whether values are packed several to a plaintext.
    pub packed: bool,
    pub lambda_s: f64,
}

impl SgdConfig {
    /// Natural-order step sized for at most `n` items, `k` dimensions and `m` friends.
    pub fn natural(key_bits: u32, n: usize, k: usize, m: usize, packed: bool, lambda_s: f64) -> Result<Self, EncodingError> {
        let params = EncodingParams::new(crate::protocol::DEFAULT_SCALE_BITS, NATURAL_SLOT_MOD_BITS)?;
        let bound = PolynomialBound::natural_sgd(n.max(1), k, m);
        Self::with_params(key_bits, params, 3, &bound, packed, lambda_s)
    }

    /// Bipartite step sized for at most `n` items, `k` dimensions and `m` friends.
    pub fn bipartite(key_bits: u32, n: usize, k: usize, m: usize, packed: bool, lambda_s: f64) -> Result<Self, EncodingError> {
        let params = EncodingParams::new(crate::protocol::DEFAULT_SCALE_BITS, BIPARTITE_SLOT_MOD_BITS)?;
        let bound = PolynomialBound::bipartite_sgd(n.max(1), k, m);
        Self::with_params(key_bits, params, 2, &bound, packed, lambda_s)
    }

    /// Layout for an explicit encoding, result level and slot bound.
    pub fn with_params(
        key_bits: u32,
        params: EncodingParams,
        level: u32,
        bound: &PolynomialBound,
        packed: bool,
        lambda_s: f64,
    ) -> Result<Self, EncodingError> {
        let layout = if packed {
            layout_for_bound(key_bits, bound, params, level, SLOT_ALIGN_BITS)?
        } else {
            let l = PackingLayout::unpacked(key_bits, params, level)?;
            l.check_bound(&bound.eval(&params))?;
            l
        };
        Ok(SgdConfig { layout, packed, lambda_s })
    }

    /// Uses a fixed slot size instead of the minimal one.
    pub fn with_slot_bits(mut self, slot_bits: u32) -> Result<Self, EncodingError> {
        if self.packed {
            self.layout = PackingLayout::exact(self.layout.plaintext_bits(), slot_bits, self.layout.params(), self.layout.level())?;
        }
        Ok(self)
    }

    pub fn params(&self) -> EncodingParams {
        self.layout.params()
    }

    /// Values per plaintext.
    pub fn slots(&self) -> usize {
        self.layout.slot_count()
    }

    /// Plaintexts needed for a `k`-dimensional embedding.
    pub fn chunks(&self, k: usize) -> usize {
        self.layout.plaintexts_for(k)
    }
}

/// The evaluator's private part of one step. Friend embeddings are referenced
/// by their keys in the evaluator's store.
#[derive(Clone, Copy, Debug)]
pub struct UserStep<'a> {
    pub embedding: &'a [f64],
    pub ratings: &'a [f64],
    pub weights: &'a [f64],
    pub friends: &'a [VarKey],
}

/// An encrypted item gradient held by the seller.
#[derive(Clone, Debug, PartialEq)]
pub struct EncryptedGradient {
    pub cts: Vec<Ciphertext>,
    pub layout: PackingLayout,
    pub dim: usize,
}

impl EncryptedGradient {
    /// Homomorphic sum with another gradient for the same item.
    pub fn add_assign(&mut self, other: &EncryptedGradient, pk: &PublicKey) -> Result<(), ProtocolError> {
        if self.layout != other.layout || self.dim != other.dim || self.cts.len() != other.cts.len() {
            return Err(ProtocolError::LayoutMismatch("gradients use different layouts".into()));
        }
        for (a, b) in self.cts.iter_mut().zip(&other.cts) {
            *a = pk.hom_add(a, b)?;
        }
        Ok(())
    }

    /// Decrypts and decodes into the full gradient.
    pub fn open(&self, sk: &SecretKey) -> Result<Vec<f64>, ProtocolError> {
        let mut out = Vec::with_capacity(self.dim);
        for c in &self.cts {
            let x = sk.decrypt(c)?;
            out.extend(self.layout.decode_slots(&x));
        }
        out.truncate(self.dim);
        Ok(out.into_iter().map(|g| 2.0 * g).collect())
    }
}

/// Result of one secure step: the user's gradient at the user, item gradients
/// still encrypted at the seller.
#[derive(Clone, Debug)]
pub struct SecureStepOutput {
    pub user_grad: Vec<f64>,
    pub item_grads: Vec<EncryptedGradient>,
}

/// Level-`level` encoding modulo `Q`.
pub(crate) fn enc_q(x: f64, params: &EncodingParams, level: u32) -> Result<BigUint, EncodingError> {
    encode_at(x, params.scale_bits(), level, &params.slot_modulus())
}

/// A friend's embedding packed along the embedding axis, encrypted under the seller's key.
pub fn encrypt_friend_embedding<R: RngCore + ?Sized>(
    pk: &PublicKey,
    embedding: &[f64],
    cfg: &SgdConfig,
    rng: &mut R,
) -> Result<Vec<Ciphertext>, ProtocolError> {
    let params = cfg.params();
    let vals = embedding.iter().map(|&f| enc_q(f, &params, 1)).collect::<Result<Vec<_>, _>>()?;
    let plain = cfg.layout.pack_all(&vals)?;
    Ok(pk.encrypt_batch(&plain, rng)?)
}

/// First store key used for injected friend embeddings.
pub const FRIEND_KEY_BASE: VarKey = 1 << 48;

/// Registers friends' encrypted embeddings in the evaluator's store.
pub fn inject_friend_embeddings<T: Transport>(
    s: &mut Session<T>,
    friends: Vec<Vec<Ciphertext>>,
    dim: usize,
    cfg: &SgdConfig,
) -> Result<Vec<VarKey>, ProtocolError> {
    let pk = s.evaluator.public_key().clone();
    let expected = cfg.chunks(dim);
    let mut keys = Vec::with_capacity(friends.len());
    for (j, cts) in friends.into_iter().enumerate() {
        if cts.len() != expected {
            return Err(ProtocolError::LayoutMismatch(format!(
                "friend embedding has {} ciphertexts, layout needs {expected}",
                cts.len()
            )));
        }
        for c in &cts {
            pk.hom_add(c, &pk.zero_ciphertext()).map_err(ProtocolError::Crypto)?;
        }
        let key = FRIEND_KEY_BASE + j as VarKey;
        s.evaluator.store_mut().insert(key, StoredValue::Packed { cts, layout: cfg.layout.clone() });
        keys.push(key);
    }
    Ok(keys)
}

/// Items grouped into plaintext chunks.
pub(crate) fn chunk_ranges(len: usize, per: usize) -> Vec<std::ops::Range<usize>> {
    (0..len.div_ceil(per)).map(|c| c * per..((c + 1) * per).min(len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(r: &[f64], w: &[f64], f: &[Vec<f64>]) -> StepBatch {
        StepBatch { ratings: r.to_vec(), weights: w.to_vec(), friends: f.to_vec() }
    }

    #[test]
    fn zero_error() {
        let g = plaintext_sgd_step(&[0.5], &[vec![2.0]], &batch(&[1.0], &[1.0], &[]), 0.0).unwrap();
        assert_eq!(g.user, vec![0.0]);
        assert_eq!(g.items, vec![vec![0.0]]);
    }

    #[test]
    fn unit_error() {
        let g = plaintext_sgd_step(&[1.0], &[vec![1.0]], &batch(&[0.0], &[1.0], &[]), 0.0).unwrap();
        assert_eq!(g.user, vec![2.0]);
        assert_eq!(g.items, vec![vec![2.0]]);
    }

    #[test]
    fn pure_social_term_pulls_toward_friend() {
        // u = 0, friend at 1: the gradient points away from the friend so that
        // a descent step moves u toward it.
        let g = plaintext_sgd_step(&[0.0], &[], &batch(&[], &[], &[vec![1.0]]), 1.0).unwrap();
        assert_eq!(g.user, vec![-2.0]);
        let stepped = 0.0 - 0.1 * g.user[0];
        assert!((stepped - 1.0f64).abs() < 1.0);
    }

    #[test]
    fn friend_equal_to_user_contributes_nothing() {
        let u = [0.3, -0.2];
        let v = vec![vec![0.1, 0.4]];
        let a = plaintext_sgd_step(&u, &v, &batch(&[1.0], &[1.0], &[]), 0.7).unwrap();
        let b = plaintext_sgd_step(&u, &v, &batch(&[1.0], &[1.0], &[u.to_vec()]), 0.7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_finite_differences() {
        let u = vec![0.3, -0.2, 0.5];
        let items = vec![vec![0.1, 0.4, -0.3], vec![-0.2, 0.2, 0.6]];
        let b = batch(&[0.5, -1.0], &[1.0, 0.5], &[vec![0.2, 0.1, 0.0], vec![-0.4, 0.3, 0.2]]);
        let ls = 0.8;
        let loss = |u: &[f64], items: &[Vec<f64>]| {
            let mut l = 0.0;
            for ((v, r), w) in items.iter().zip(&b.ratings).zip(&b.weights) {
                let d: f64 = u.iter().zip(v).map(|(a, c)| a * c).sum();
                l += w * (d - r) * (d - r);
            }
            for f in &b.friends {
                l += ls / b.friends.len() as f64 * u.iter().zip(f).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
            }
            l
        };
        let g = plaintext_sgd_step(&u, &items, &b, ls).unwrap();
        let h = 1e-6;
        for p in 0..3 {
            let mut up = u.clone();
            up[p] += h;
            let mut dn = u.clone();
            dn[p] -= h;
            let fd = (loss(&up, &items) - loss(&dn, &items)) / (2.0 * h);
            assert!((fd - g.user[p]).abs() < 1e-6, "user {p}: {fd} vs {}", g.user[p]);
        }
        for i in 0..2 {
            for p in 0..3 {
                let mut vp = items.clone();
                vp[i][p] += h;
                let mut vn = items.clone();
                vn[i][p] -= h;
                let fd = (loss(&u, &vp) - loss(&u, &vn)) / (2.0 * h);
                assert!((fd - g.items[i][p]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_errors() {
        assert!(plaintext_sgd_step(&[], &[], &StepBatch::default(), 0.0).is_err());
        assert!(plaintext_sgd_step(&[1.0], &[vec![1.0, 2.0]], &batch(&[1.0], &[1.0], &[]), 0.0).is_err());
        assert!(plaintext_sgd_step(&[1.0], &[vec![1.0]], &batch(&[], &[], &[]), 0.0).is_err());
        assert!(plaintext_sgd_step(&[f64::NAN], &[], &StepBatch::default(), 0.0).is_err());
    }

    #[test]
    fn chunking() {
        assert_eq!(chunk_ranges(5, 2), vec![0..2, 2..4, 4..5]);
        assert_eq!(chunk_ranges(0, 2), vec![]);
    }

    #[test]
    fn default_layouts() {
        let c = SgdConfig::natural(2048, 8, 8, 10, true, 0.5).unwrap();
        assert_eq!((c.layout.slot_bits(), c.slots()), (256, 8));
        let c = SgdConfig::bipartite(2048, 8, 8, 10, true, 0.5).unwrap();
        assert_eq!((c.layout.slot_bits(), c.slots()), (128, 16));
        let c = SgdConfig::natural(512, 8, 10, 10, true, 0.5).unwrap();
        assert_eq!(c.slots(), 2);
        let c = SgdConfig::natural(512, 8, 10, 10, false, 0.5).unwrap();
        assert_eq!(c.slots(), 1);
    }
}
