//! Rearranging packed ciphertext slots between layouts.
//!
//! The evaluator blinds every occupied slot with an independent mask, the key
//! holder decrypts, moves the blinded values into the target layout and
//! re-encrypts, and the evaluator removes the masks again.

use std::collections::HashMap;

use num_bigint::BigUint;

use super::{DecryptPurpose, MaskId, Session};
use crate::circuit::VarKey;
use crate::encoding::neg_mod;
use crate::error::ProtocolError;
use crate::packing::PackingLayout;
use crate::paillier::Ciphertext;
use crate::transport::Transport;

/// Minimum statistical hiding margin, in bits, between slot values and their masks.
pub const MASK_MARGIN_BITS: u64 = 40;

/// What the target slots hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepackMode {
    /// The original slot values, bit for bit.
    Exact,
    /// Values congruent to the originals modulo `Q`, each below `2Q`.
    ModQ,
}

/// Uniform mask bound `2^cap_bits - bound`, checked for the hiding margin.
pub(crate) fn mask_bound(cap_bits: u32, bound: &BigUint) -> Result<BigUint, ProtocolError> {
    let cap = BigUint::from(1u32) << cap_bits;
    if bound >= &cap || cap.bits() <= bound.bits() + MASK_MARGIN_BITS {
        return Err(ProtocolError::MaskMargin(format!(
            "slot values of {} bits leave less than {MASK_MARGIN_BITS} bits of mask below 2^{cap_bits}",
            bound.bits()
        )));
    }
    Ok(cap - bound)
}

/// Re-packs slots of `source` (row `r` holds the values named by `source_keys[r]`)
/// into rows named by `target_keys`. Source slot values must be below `slot_bound`.
/// Returns one ciphertext per target row, held by the evaluator.
#[allow(clippy::too_many_arguments)]
pub fn secure_repack<T: Transport>(
    s: &mut Session<T>,
    source: &[Ciphertext],
    source_keys: &[Vec<VarKey>],
    source_layout: &PackingLayout,
    target_keys: &[Vec<VarKey>],
    target_layout: &PackingLayout,
    slot_bound: &BigUint,
    mode: RepackMode,
) -> Result<Vec<Ciphertext>, ProtocolError> {
    if source.len() != source_keys.len() {
        return Err(ProtocolError::InvalidInput("one key row per source ciphertext".into()));
    }
    if source_layout.params() != target_layout.params() {
        return Err(ProtocolError::LayoutMismatch("source and target use different encodings".into()));
    }
    let mut seen = HashMap::new();
    for (r, row) in source_keys.iter().enumerate() {
        if row.len() > source_layout.slot_count() {
            return Err(ProtocolError::InvalidInput(format!("source row {r} longer than layout")));
        }
        for (slot, &k) in row.iter().enumerate() {
            if seen.insert(k, (r, slot)).is_some() {
                return Err(ProtocolError::InvalidInput(format!("key {k} appears twice in source")));
            }
        }
    }
    for (r, row) in target_keys.iter().enumerate() {
        if row.len() > target_layout.slot_count() {
            return Err(ProtocolError::InvalidInput(format!("target row {r} longer than layout")));
        }
        for k in row {
            if !seen.contains_key(k) {
                return Err(ProtocolError::InvalidInput(format!("target key {k} not in source")));
            }
        }
    }
    let q = source_layout.params().slot_modulus();
    let cap_bits = match mode {
        RepackMode::Exact => source_layout.min_capacity_bits().min(target_layout.min_capacity_bits()),
        RepackMode::ModQ => source_layout.min_capacity_bits(),
    };
    let m = mask_bound(cap_bits, slot_bound)?;
    let pk = s.evaluator.pk.clone();
    let n = pk.n().clone();

    // Evaluator: blind every occupied slot.
    let mut masks: HashMap<VarKey, (MaskId, BigUint)> = HashMap::new();
    let mut row_mask_ids = Vec::with_capacity(source.len());
    let mut mask_plain = Vec::with_capacity(source.len());
    for row in source_keys {
        let mut vals = Vec::with_capacity(row.len());
        let mut ids = Vec::with_capacity(row.len());
        for &k in row {
            let (id, r) = s.evaluator.draw_mask(&m);
            vals.push(r.clone());
            ids.push(id);
            masks.insert(k, (id, r));
        }
        mask_plain.push(source_layout.pack(&vals)?);
        row_mask_ids.push(ids);
    }
    let enc_masks = pk.encrypt_batch(&mask_plain, &mut s.evaluator.rng)?;
    let blinded = source
        .iter()
        .zip(&enc_masks)
        .map(|(c, e)| pk.hom_add(c, e))
        .collect::<Result<Vec<_>, _>>()?;
    let blinded = s.send_ciphers_to_holder(blinded)?;

    // Key holder: decrypt, move, re-encrypt.
    let mut values: HashMap<VarKey, BigUint> = HashMap::new();
    for ((c, row), ids) in blinded.iter().zip(source_keys).zip(&row_mask_ids) {
        let x = s.holder_decrypt(c, ids, DecryptPurpose::Masked)?;
        let slots = source_layout.unpack(&x);
        for (slot, &k) in row.iter().enumerate() {
            values.insert(k, slots[slot].clone());
        }
    }
    let mut out_plain = Vec::with_capacity(target_keys.len());
    for row in target_keys {
        let vals: Vec<BigUint> = row
            .iter()
            .map(|k| match mode {
                RepackMode::Exact => values[k].clone(),
                RepackMode::ModQ => &values[k] % &q,
            })
            .collect();
        out_plain.push(target_layout.pack(&vals)?);
    }
    let out = s.holder.sk.encrypt_batch(&out_plain, &mut s.holder.rng)?;
    let out = s.send_ciphers_to_evaluator(out)?;

    // Evaluator: strip the masks.
    let mut result = Vec::with_capacity(out.len());
    for (c, row) in out.iter().zip(target_keys) {
        let plain = match mode {
            RepackMode::Exact => {
                let rs: Vec<BigUint> = row.iter().map(|k| masks[k].1.clone()).collect();
                neg_mod(&target_layout.pack(&rs)?, &n)
            }
            RepackMode::ModQ => {
                let rs: Vec<BigUint> = row.iter().map(|k| neg_mod(&(&masks[k].1 % &q), &q)).collect();
                target_layout.pack(&rs)?
            }
        };
        result.push(pk.add_plain(c, &plain)?);
    }
    for (id, _) in masks.values() {
        s.evaluator.masks.retire(*id)?;
    }
    Ok(result)
}
