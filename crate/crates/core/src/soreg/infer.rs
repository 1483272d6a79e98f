//! Secure rating prediction: `u . v_i` for a user embedding held by the
//! evaluator and item embeddings held by the key holder.

use num_bigint::BigUint;
use num_traits::Zero;

use super::{chunk_ranges, enc_q, SLOT_ALIGN_BITS};
use crate::circuit::{CircuitBuilder, Party, VarKey};
use crate::encoding::{neg_mod, EncodingParams};
use crate::error::ProtocolError;
use crate::packing::{layout_for_bound, PolynomialBound};
use crate::protocol::{secure_poly, DecryptPurpose, Reveal, Revealed, Session, DEFAULT_SCALE_BITS};
use crate::transport::Transport;

/// Slot modulus exponent for packed predictions (|u . v| < 2^9).
pub const INFER_SLOT_MOD_BITS: u32 = 56;

/// How predictions are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferMode {
    /// One generic circuit evaluation per item.
    Circuit,
    /// Items packed into plaintext slots, one round for all of them.
    Packed,
}

/// Predicts `u . v_i` for every item.
pub fn secure_infer<T: Transport>(
    s: &mut Session<T>,
    user: &[f64],
    items: &[Vec<f64>],
    mode: InferMode,
    reveal: Reveal,
) -> Result<Vec<Revealed>, ProtocolError> {
    let k = user.len();
    if k == 0 || items.iter().any(|v| v.len() != k) {
        return Err(ProtocolError::InvalidInput("item and user embeddings must share a positive length".into()));
    }
    match mode {
        InferMode::Circuit => items.iter().map(|v| infer_one(s, user, v, reveal)).collect(),
        InferMode::Packed => infer_packed(s, user, items, reveal),
    }
}

fn infer_one<T: Transport>(s: &mut Session<T>, user: &[f64], item: &[f64], reveal: Reveal) -> Result<Revealed, ProtocolError> {
    let k = user.len();
    let offset = k as VarKey;
    let mut b = CircuitBuilder::new();
    let mut prods = Vec::with_capacity(k);
    for q in 0..k {
        let h = b.input(Party::KeyHolder, q as VarKey);
        let e = b.input(Party::Evaluator, offset + q as VarKey);
        prods.push(b.mul(h, e));
    }
    b.sum(&prods);
    let c = b.finish()?;
    s.holder.set_inputs(item.iter().enumerate().map(|(q, &x)| (q as VarKey, x)).collect());
    s.evaluator.set_inputs(user.iter().enumerate().map(|(q, &x)| (offset + q as VarKey, x)).collect());
    let bound: f64 = user.iter().zip(item).map(|(a, b)| (a * b).abs()).sum::<f64>().max(1.0);
    secure_poly(s, &c, reveal, bound)
}

fn infer_packed<T: Transport>(
    s: &mut Session<T>,
    user: &[f64],
    items: &[Vec<f64>],
    reveal: Reveal,
) -> Result<Vec<Revealed>, ProtocolError> {
    let k = user.len();
    let params = EncodingParams::new(DEFAULT_SCALE_BITS, INFER_SLOT_MOD_BITS)?;
    let pk = s.evaluator.public_key().clone();
    let n_mod = pk.n().clone();
    let layout = layout_for_bound(pk.key_bits(), &PolynomialBound::sum_of_products(k as u64, 2), params, 2, SLOT_ALIGN_BITS)?;
    let chunks = chunk_ranges(items.len(), layout.slot_count());
    let nc = chunks.len();

    let mut plain = Vec::with_capacity(k * nc);
    for q in 0..k {
        for c in &chunks {
            let vals = items[c.clone()].iter().map(|v| enc_q(v[q], &params, 1)).collect::<Result<Vec<_>, _>>()?;
            plain.push(layout.pack(&vals)?);
        }
    }
    let cts = s.holder.sk.encrypt_batch(&plain, &mut s.holder.rng)?;
    let cts = s.send_ciphers_to_evaluator(cts)?;

    let mut acc = vec![pk.zero_ciphertext(); nc];
    for (q, &u) in user.iter().enumerate() {
        let f = enc_q(u, &params, 1)?;
        if f.is_zero() {
            continue;
        }
        for (ci, a) in acc.iter_mut().enumerate() {
            *a = pk.hom_add(a, &pk.ct_pt_mul(&cts[q * nc + ci], &f)?)?;
        }
    }

    let decode = |xs: &[BigUint]| -> Vec<f64> {
        let mut out: Vec<f64> = xs.iter().flat_map(|x| layout.decode_slots(x)).collect();
        out.truncate(items.len());
        out
    };
    let mut holder = None;
    let mut evaluator = None;
    match reveal {
        Reveal::ToEvaluator => {
            let masks: Vec<_> = (0..nc).map(|_| s.evaluator.draw_mask(&n_mod)).collect();
            let rs: Vec<BigUint> = masks.iter().map(|(_, r)| r.clone()).collect();
            let er = pk.encrypt_batch(&rs, &mut s.evaluator.rng)?;
            let blinded = acc.iter().zip(&er).map(|(a, b)| pk.hom_add(a, b)).collect::<Result<Vec<_>, _>>()?;
            let blinded = s.send_ciphers_to_holder(blinded)?;
            let mut opened = Vec::with_capacity(nc);
            for (c, (id, _)) in blinded.iter().zip(&masks) {
                opened.push(s.holder_decrypt(c, &[*id], DecryptPurpose::Masked)?);
            }
            let got = s.send_plain_to_evaluator(opened)?;
            let mut xs = Vec::with_capacity(nc);
            for (x, (id, r)) in got.iter().zip(&masks) {
                xs.push((x + neg_mod(r, &n_mod)) % &n_mod);
                s.evaluator.masks.retire(*id)?;
            }
            evaluator = Some(decode(&xs));
        }
        Reveal::ToHolder | Reveal::ToBoth => {
            let fresh = pk.rerandomize_batch(&acc, &mut s.evaluator.rng)?;
            let got = s.send_ciphers_to_holder(fresh)?;
            let mut xs = Vec::with_capacity(nc);
            for c in &got {
                xs.push(s.holder_decrypt(c, &[], DecryptPurpose::Output)?);
            }
            holder = Some(decode(&xs));
            if reveal == Reveal::ToBoth {
                let back = s.send_plain_to_evaluator(xs)?;
                evaluator = Some(decode(&back));
            }
        }
    }
    Ok((0..items.len())
        .map(|i| Revealed { holder: holder.as_ref().map(|h| h[i]), evaluator: evaluator.as_ref().map(|e| e[i]) })
        .collect())
}
