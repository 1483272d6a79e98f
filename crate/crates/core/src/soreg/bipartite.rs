//! Gradient step in bipartite form: every monomial is a product of one
//! seller factor and one user factor, so a single round of encrypted seller
//! factors suffices and all results land at level 2.

use num_bigint::BigUint;
use num_traits::Zero;
use rayon::prelude::*;

use super::{chunk_ranges, check_shapes, enc_q, EncryptedGradient, SecureStepOutput, SgdConfig, UserStep};
use crate::encoding::neg_mod;
use crate::error::ProtocolError;
use crate::packing::PolynomialBound;
use crate::paillier::Ciphertext;
use crate::protocol::{DecryptPurpose, MaskId, Session};
use crate::transport::Transport;

/// One SGD step for a user against one seller's items, bipartite form.
///
/// Same inputs and outputs as [`super::secure_sgd_natural`]; results are at
/// level 2 and `cfg.layout` must say so.
pub fn secure_sgd_bipartite<T: Transport>(
    s: &mut Session<T>,
    user: &UserStep,
    items: &[Vec<f64>],
    cfg: &SgdConfig,
) -> Result<SecureStepOutput, ProtocolError> {
    check_shapes(user.embedding, items, user.ratings, user.weights)?;
    let layout = &cfg.layout;
    if layout.level() != 2 {
        return Err(ProtocolError::Level(format!("bipartite step needs level-2 results, layout has {}", layout.level())));
    }
    let params = layout.params();
    let q = params.slot_modulus();
    let pk = s.evaluator.public_key().clone();
    let n_mod = pk.n().clone();
    let (n, k, m) = (items.len(), user.embedding.len(), user.friends.len());
    if n == 0 {
        return Err(ProtocolError::InvalidInput("step needs at least one item".into()));
    }
    let dim_chunks = chunk_ranges(k, layout.slot_count());
    let kc = dim_chunks.len();
    layout.check_bound(&PolynomialBound::bipartite_sgd(n, k, m).eval(&params))?;
    let mut friend_cts = Vec::with_capacity(m);
    for &key in user.friends {
        let (cts, fl) = s.evaluator.store().packed(key)?;
        if fl.slot_count() != layout.slot_count() || fl.params() != params || cts.len() != kc {
            return Err(ProtocolError::LayoutMismatch(format!("friend embedding {key} uses another layout")));
        }
        friend_cts.push(cts.to_vec());
    }
    let enc1 = |x: f64| enc_q(x, &params, 1);
    let pack_dim = |f: &dyn Fn(usize) -> f64| -> Result<Vec<BigUint>, ProtocolError> {
        let mut out = Vec::with_capacity(kc);
        for c in &dim_chunks {
            let vals = c.clone().map(|p| enc1(f(p))).collect::<Result<Vec<_>, _>>()?;
            out.push(layout.pack(&vals)?);
        }
        Ok(out)
    };

    // Seller: v_iq v_ip packed on p, v_ip packed on p, and v_iq as scalars.
    let mut leg1 = Vec::with_capacity(n * k * kc + n * kc + n * k);
    for v in items {
        for qd in 0..k {
            leg1.extend(pack_dim(&|p| v[qd] * v[p])?);
        }
    }
    if cfg.packed {
        for v in items {
            leg1.extend(pack_dim(&|p| v[p])?);
        }
    }
    for v in items {
        for &x in v {
            leg1.push(enc1(x)?);
        }
    }
    let leg1 = s.holder.sk.encrypt_batch(&leg1, &mut s.holder.rng)?;
    let leg1 = s.send_ciphers_to_evaluator(leg1)?;
    let (vv, rest) = leg1.split_at(n * k * kc);
    let (vp, vs) = if cfg.packed { rest.split_at(n * kc) } else { rest.split_at(0) };
    // Unpacked, one scalar per ciphertext serves both roles.
    let vp_at = |i: usize, pc: usize| -> &Ciphertext {
        if cfg.packed {
            &vp[i * kc + pc]
        } else {
            &vs[i * k + pc]
        }
    };

    let mul_acc = |acc: &mut Ciphertext, c: &Ciphertext, f: &BigUint| -> Result<(), ProtocolError> {
        if !f.is_zero() {
            *acc = pk.hom_add(acc, &pk.ct_pt_mul(c, f)?)?;
        }
        Ok(())
    };

    // User gradient.
    let mut gu = Vec::with_capacity(kc);
    for (pc, c) in dim_chunks.iter().enumerate() {
        let partials = (0..n)
            .into_par_iter()
            .map(|i| {
                let w = user.weights[i];
                let mut part = pk.zero_ciphertext();
                for qd in 0..k {
                    mul_acc(&mut part, &vv[(i * k + qd) * kc + pc], &enc1(w * user.embedding[qd])?)?;
                }
                mul_acc(&mut part, vp_at(i, pc), &neg_mod(&enc1(w * user.ratings[i])?, &q))?;
                Ok(part)
            })
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        let mut acc = pk.zero_ciphertext();
        for part in &partials {
            acc = pk.hom_add(&acc, part)?;
        }
        if m > 0 {
            let coef = neg_mod(&enc1(cfg.lambda_s / m as f64)?, &q);
            for f in &friend_cts {
                mul_acc(&mut acc, &f[pc], &coef)?;
            }
            let own = c
                .clone()
                .map(|p| enc_q(cfg.lambda_s * user.embedding[p], &params, 2))
                .collect::<Result<Vec<_>, _>>()?;
            acc = pk.add_plain(&acc, &layout.pack(&own)?)?;
        }
        gu.push(acc);
    }

    // Item gradients.
    let gv = (0..n * kc)
        .into_par_iter()
        .map(|j| {
            let (i, c) = (j / kc, &dim_chunks[j % kc]);
            let w = user.weights[i];
            let u = user.embedding;
            let mut acc = pk.zero_ciphertext();
            for qd in 0..k {
                let vals = c.clone().map(|p| enc1(w * u[qd] * u[p])).collect::<Result<Vec<_>, _>>()?;
                mul_acc(&mut acc, &vs[i * k + qd], &layout.pack(&vals)?)?;
            }
            let offs = c
                .clone()
                .map(|p| Ok(neg_mod(&enc_q(w * user.ratings[i] * u[p], &params, 2)?, &q)))
                .collect::<Result<Vec<_>, ProtocolError>>()?;
            Ok(pk.add_plain(&acc, &layout.pack(&offs)?)?)
        })
        .collect::<Result<Vec<Ciphertext>, ProtocolError>>()?;

    let out_masks: Vec<(MaskId, BigUint)> = (0..kc).map(|_| s.evaluator.draw_mask(&n_mod)).collect();
    let mask_plain: Vec<BigUint> = out_masks.iter().map(|(_, r)| r.clone()).collect();
    let enc_masks = pk.encrypt_batch(&mask_plain, &mut s.evaluator.rng)?;
    let mut leg2 = gu
        .iter()
        .zip(&enc_masks)
        .map(|(a, b)| pk.hom_add(a, b))
        .collect::<Result<Vec<_>, _>>()?;
    leg2.extend(pk.rerandomize_batch(&gv, &mut s.evaluator.rng)?);
    let leg2 = s.send_ciphers_to_holder(leg2)?;
    let (gu_blind, gv_held) = leg2.split_at(kc);

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
