//! Gradient step evaluated in the natural order: residuals first, then the
//! residual-weighted sums. The seller sees every residual only under a
//! one-time mask and re-encrypts the per-item residuals so the user can
//! finish the item gradients.

use num_bigint::BigUint;
use num_traits::Zero;
use rayon::prelude::*;

use super::{chunk_ranges, check_shapes, enc_q, EncryptedGradient, SecureStepOutput, SgdConfig, UserStep};
use crate::encoding::neg_mod;
use crate::error::ProtocolError;
use crate::packing::PolynomialBound;
use crate::paillier::Ciphertext;
use crate::protocol::repack::mask_bound;
use crate::protocol::{DecryptPurpose, MaskId, Session};
use crate::transport::Transport;

/// One SGD step for a user against one seller's items.
///
/// The seller holds `items` in the clear; the user's data comes in `user`.
/// Friend embeddings must already sit in the evaluator's store (see
/// [`super::inject_friend_embeddings`]). Returns the user gradient to the user
/// and the item gradients, encrypted, to the seller.
pub fn secure_sgd_natural<T: Transport>(
    s: &mut Session<T>,
    user: &UserStep,
    items: &[Vec<f64>],
    cfg: &SgdConfig,
) -> Result<SecureStepOutput, ProtocolError> {
    check_shapes(user.embedding, items, user.ratings, user.weights)?;
    let layout = &cfg.layout;
    if layout.level() != 3 {
        return Err(ProtocolError::Level(format!("natural step needs level-3 results, layout has {}", layout.level())));
    }
    let params = layout.params();
    let q = params.slot_modulus();
    let pk = s.evaluator.public_key().clone();
    let n_mod = pk.n().clone();
    let (n, k, m) = (items.len(), user.embedding.len(), user.friends.len());
    let item_chunks = chunk_ranges(n, layout.slot_count());
    let dim_chunks = chunk_ranges(k, layout.slot_count());

    // Everything that can fail on sizes is checked before the first message.
    layout.check_bound(&PolynomialBound::natural_sgd(n.max(1), k, m).eval(&params))?;
    let residual_bound = BigUint::from(k) * &q * &q + &q;
    let residual_masks = mask_bound(layout.min_capacity_bits(), &residual_bound)?;
    if cfg.packed {
        for c in &item_chunks {
            let w = user.weights[c.start];
            if user.weights[c.clone()].iter().any(|x| *x != w) {
                return Err(ProtocolError::InvalidInput(
                    "packed natural step needs equal weights within each item chunk".into(),
                ));
            }
        }
    }
    let mut friend_cts = Vec::with_capacity(m);
    for &key in user.friends {
        let (cts, fl) = s.evaluator.store().packed(key)?;
        if fl.slot_count() != layout.slot_count() || fl.params() != params || cts.len() != dim_chunks.len() {
            return Err(ProtocolError::LayoutMismatch(format!("friend embedding {key} uses another layout")));
        }
        friend_cts.push(cts.to_vec());
    }
    let enc1 = |x: f64| enc_q(x, &params, 1);

    // Seller: item embeddings packed along the item axis, one row per coordinate.
    if n == 0 {
        return Err(ProtocolError::InvalidInput("step needs at least one item".into()));
    }
    let mut by_coord = Vec::with_capacity(k * item_chunks.len());
    for qd in 0..k {
        for c in &item_chunks {
            let vals = items[c.clone()].iter().map(|v| enc1(v[qd])).collect::<Result<Vec<_>, _>>()?;
            by_coord.push(layout.pack(&vals)?);
        }
    }
    let cts = s.holder.sk.encrypt_batch(&by_coord, &mut s.holder.rng)?;
    let cts = s.send_ciphers_to_evaluator(cts)?;

    // User: residuals e_i = w_i (u . v_i - r_i) at level 2, then blind each slot.
    let nc = item_chunks.len();
    let residuals = item_chunks
        .par_iter()
        .enumerate()
        .map(|(ci, c)| {
            let w = user.weights[c.start];
            let mut acc = pk.zero_ciphertext();
            for qd in 0..k {
                let factor = enc1(w * user.embedding[qd])?;
                if !factor.is_zero() {
                    acc = pk.hom_add(&acc, &pk.ct_pt_mul(&cts[qd * nc + ci], &factor)?)?;
                }
            }
            let offs = c
                .clone()
                .map(|i| Ok(neg_mod(&enc_q(user.weights[i] * user.ratings[i], &params, 2)?, &q)))
                .collect::<Result<Vec<_>, ProtocolError>>()?;
            Ok(pk.add_plain(&acc, &layout.pack(&offs)?)?)
        })
        .collect::<Result<Vec<Ciphertext>, ProtocolError>>()?;
    let mut masks: Vec<Vec<(MaskId, BigUint)>> = Vec::with_capacity(nc);
    let mut mask_plain = Vec::with_capacity(nc);
    for c in &item_chunks {
        let row: Vec<(MaskId, BigUint)> = c.clone().map(|_| s.evaluator.draw_mask(&residual_masks)).collect();
        mask_plain.push(layout.pack(&row.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>())?);
        masks.push(row);
    }
    let enc_masks = pk.encrypt_batch(&mask_plain, &mut s.evaluator.rng)?;
    let blinded = residuals
        .iter()
        .zip(&enc_masks)
        .map(|(a, b)| pk.hom_add(a, b))
        .collect::<Result<Vec<_>, _>>()?;
    let blinded = s.send_ciphers_to_holder(blinded)?;

    // Seller: blinded residuals modulo Q, their weighted sums over items,
    // and (packed) the residuals re-encrypted one per ciphertext.
    let mut y_hat = Vec::with_capacity(n);
    for (ct, row) in blinded.iter().zip(&masks) {
        let ids: Vec<MaskId> = row.iter().map(|(id, _)| *id).collect();
        let x = s.holder_decrypt(ct, &ids, DecryptPurpose::Masked)?;
        y_hat.extend(layout.unpack(&x).into_iter().take(row.len()).map(|v| v % &q));
    }
    let mut leg3 = Vec::with_capacity(dim_chunks.len() * (1 + n) + n);
    for c in &dim_chunks {
        let mut z = Vec::with_capacity(c.len());
        for p in c.clone() {
            let mut acc = BigUint::zero();
            for (yi, v) in y_hat.iter().zip(items) {
                acc += yi * enc1(v[p])?;
            }
            z.push(acc % &q);
        }
        leg3.push(layout.pack(&z)?);
    }
    if cfg.packed {
        leg3.extend(y_hat.iter().cloned());
    }
    for v in items {
        for c in &dim_chunks {
            let vals = c.clone().map(|p| enc1(v[p])).collect::<Result<Vec<_>, _>>()?;
            leg3.push(layout.pack(&vals)?);
        }
    }
    let leg3 = s.holder.sk.encrypt_batch(&leg3, &mut s.holder.rng)?;
    let leg3 = s.send_ciphers_to_evaluator(leg3)?;
    let kc = dim_chunks.len();
    let (z_cts, rest) = leg3.split_at(kc);
    let (e_cts, vp_cts) = if cfg.packed { rest.split_at(n) } else { rest.split_at(0) };

    // User: strip residual masks, form both gradients.
    let m_hat: Vec<BigUint> = masks.iter().flatten().map(|(_, r)| neg_mod(r, &q)).collect();
    let mut gu = Vec::with_capacity(kc);
    for (pc, c) in dim_chunks.iter().enumerate() {
        let corrections = (0..n)
            .into_par_iter()
            .filter(|&i| !m_hat[i].is_zero())
            .map(|i| pk.ct_pt_mul(&vp_cts[i * kc + pc], &m_hat[i]))
            .collect::<Result<Vec<_>, _>>()?;
        let mut acc = z_cts[pc].clone();
        for c in &corrections {
            acc = pk.hom_add(&acc, c)?;
        }
        if m > 0 {
            let mut fsum = friend_cts[0][pc].clone();
            for f in &friend_cts[1..] {
                fsum = pk.hom_add(&fsum, &f[pc])?;
            }
            let coef = neg_mod(&enc_q(cfg.lambda_s / m as f64, &params, 2)?, &q);
            if !coef.is_zero() {
                acc = pk.hom_add(&acc, &pk.ct_pt_mul(&fsum, &coef)?)?;
            }
            let own = c
                .clone()
                .map(|p| enc_q(cfg.lambda_s * user.embedding[p], &params, 3))
                .collect::<Result<Vec<_>, _>>()?;
            acc = pk.add_plain(&acc, &layout.pack(&own)?)?;
        }
        gu.push(acc);
    }
    let own_packed = dim_chunks
        .iter()
        .map(|c| {
            let vals = c.clone().map(|p| enc1(user.embedding[p])).collect::<Result<Vec<_>, _>>()?;
            Ok(layout.pack(&vals)?)
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    let gv = (0..n * kc)
        .into_par_iter()
        .map(|j| {
            let (i, pc) = (j / kc, j % kc);
            let e_i = if cfg.packed { pk.add_plain(&e_cts[i], &m_hat[i])? } else { residuals[i].clone() };
            Ok(pk.ct_pt_mul(&e_i, &own_packed[pc])?)
        })
        .collect::<Result<Vec<Ciphertext>, ProtocolError>>()?;
    for (id, _) in masks.iter().flatten() {
        s.evaluator.masks.retire(*id)?;
    }
    let out_masks: Vec<(MaskId, BigUint)> = (0..kc).map(|_| s.evaluator.draw_mask(&n_mod)).collect();
    let mask_plain: Vec<BigUint> = out_masks.iter().map(|(_, r)| r.clone()).collect();
    let enc_masks = pk.encrypt_batch(&mask_plain, &mut s.evaluator.rng)?;
    let mut leg4 = gu
        .iter()
        .zip(&enc_masks)
        .map(|(a, b)| pk.hom_add(a, b))
        .collect::<Result<Vec<_>, _>>()?;
    leg4.extend(pk.rerandomize_batch(&gv, &mut s.evaluator.rng)?);
    let leg4 = s.send_ciphers_to_holder(leg4)?;
    let (gu_blind, gv_held) = leg4.split_at(kc);

    // Seller: open the blinded user gradient for the user, keep item gradients.
    let mut opened = Vec::with_capacity(kc);
    for (ct, (id, _)) in gu_blind.iter().zip(&out_masks) {
        opened.push(s.holder_decrypt(ct, &[*id], DecryptPurpose::Masked)?);
    }
    let item_grads = gv_held
        .chunks(kc)
        .map(|cts| EncryptedGradient { cts: cts.to_vec(), layout: layout.clone(), dim: k })
        .collect();
    let opened = s.send_plain_to_evaluator(opened)?;

    let mut user_grad = Vec::with_capacity(k);
    for (x, (id, r)) in opened.iter().zip(&out_masks) {
        let v = (x + &n_mod - r) % &n_mod;
        user_grad.extend(layout.decode_slots(&v));
        s.evaluator.masks.retire(*id)?;
    }
    user_grad.truncate(k);
    Ok(SecureStepOutput { user_grad: user_grad.into_iter().map(|g| 2.0 * g).collect(), item_grads })
}
