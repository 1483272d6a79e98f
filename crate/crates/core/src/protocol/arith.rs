//! Secure addition, multiplication and polynomial evaluation over `Z_n`.

use std::collections::HashMap;

use num_bigint::BigUint;

use super::{DecryptPurpose, Session, StoredValue};
use crate::circuit::{compute_levels, local_compute, Circuit, Expr, Gate, Party, VarKey};
use crate::encoding::{decode, encode_at, neg_mod};
use crate::error::ProtocolError;
use crate::paillier::Ciphertext;
use crate::transport::Transport;

/// Which parties' values a binary gate combines. The first operand is always
/// the intermediate one when there is one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperandCase {
    /// Key holder's input with the evaluator's input.
    HolderEvaluator,
    /// Intermediate ciphertext with the key holder's input.
    InterHolder,
    /// Intermediate ciphertext with the evaluator's input.
    InterEvaluator,
    /// Two intermediate ciphertexts.
    InterInter,
}

/// Who learns the result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reveal {
    ToHolder,
    ToEvaluator,
    ToBoth,
}

/// Decoded result as seen by each party.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Revealed {
    pub holder: Option<f64>,
    pub evaluator: Option<f64>,
}

fn scale_factor(scale_bits: u32, from: u32, to: u32) -> BigUint {
    BigUint::from(1u32) << (scale_bits * (to - from))
}

impl<T: Transport> Session<T> {
    fn holder_plain_aligned(&self, key: VarKey, level: u32, to: u32) -> Result<BigUint, ProtocolError> {
        let (v, stored) = self.holder.store.plain(key)?;
        check_level(key, stored, level)?;
        Ok(v * scale_factor(self.scale_bits(), level, to) % self.holder.sk.public().n())
    }

    fn evaluator_plain_aligned(&self, key: VarKey, level: u32, to: u32) -> Result<BigUint, ProtocolError> {
        let (v, stored) = self.evaluator.store.plain(key)?;
        check_level(key, stored, level)?;
        Ok(v * scale_factor(self.scale_bits(), level, to) % self.evaluator.pk.n())
    }

    fn evaluator_cipher_aligned(&self, key: VarKey, level: u32, to: u32) -> Result<Ciphertext, ProtocolError> {
        let (c, stored) = self.evaluator.store.cipher(key)?;
        check_level(key, stored, level)?;
        if level == to {
            return Ok(c.clone());
        }
        Ok(self.evaluator.pk.ct_pt_mul(c, &scale_factor(self.scale_bits(), level, to))?)
    }

    fn holder_encrypt(&mut self, x: &BigUint) -> Result<Ciphertext, ProtocolError> {
        Ok(self.holder.sk.encrypt(x, &mut self.holder.rng)?)
    }

    fn evaluator_encrypt(&mut self, x: &BigUint) -> Result<Ciphertext, ProtocolError> {
        Ok(self.evaluator.pk.encrypt(x, &mut self.evaluator.rng)?)
    }

    fn store_result(&mut self, key: VarKey, ct: Ciphertext, level: u32) {
        self.evaluator.store.insert(key, StoredValue::Cipher { ct, level });
    }
}

fn check_level(key: VarKey, stored: u32, claimed: u32) -> Result<(), ProtocolError> {
    if stored != claimed {
        return Err(ProtocolError::Level(format!("variable {key} is at level {stored}, not {claimed}")));
    }
    Ok(())
}

/// Stores `Enc(x1 + x2)` at the evaluator under key `j`, aligned to `op_level`.
#[allow(clippy::too_many_arguments)]
pub fn secure_add<T: Transport>(
    s: &mut Session<T>,
    case: OperandCase,
    i1: VarKey,
    i2: VarKey,
    j: VarKey,
    level1: u32,
    level2: u32,
    op_level: u32,
) -> Result<(), ProtocolError> {
    if op_level < level1.max(level2) {
        return Err(ProtocolError::Level(format!(
            "addition at level {op_level} below operand levels {level1}, {level2}"
        )));
    }
    let pk = s.evaluator.pk.clone();
    let c = match case {
        OperandCase::HolderEvaluator => {
            let a = s.holder_plain_aligned(i1, level1, op_level)?;
            let ca = s.holder_encrypt(&a)?;
            let ca = s.send_ciphers_to_evaluator(vec![ca])?.remove(0);
            let b = s.evaluator_plain_aligned(i2, level2, op_level)?;
            pk.add_plain(&ca, &b)?
        }
        OperandCase::InterHolder => {
            let c1 = s.evaluator_cipher_aligned(i1, level1, op_level)?;
            let a = s.holder_plain_aligned(i2, level2, op_level)?;
            let ca = s.holder_encrypt(&a)?;
            let ca = s.send_ciphers_to_evaluator(vec![ca])?.remove(0);
            pk.hom_add(&c1, &ca)?
        }
        OperandCase::InterEvaluator => {
            let c1 = s.evaluator_cipher_aligned(i1, level1, op_level)?;
            let b = s.evaluator_plain_aligned(i2, level2, op_level)?;
            pk.add_plain(&c1, &b)?
        }
        OperandCase::InterInter => {
            let c1 = s.evaluator_cipher_aligned(i1, level1, op_level)?;
            let c2 = s.evaluator_cipher_aligned(i2, level2, op_level)?;
            pk.hom_add(&c1, &c2)?
        }
    };
    s.store_result(j, c, op_level);
    Ok(())
}

/// Stores `Enc(x1 * x2)` at the evaluator under key `j`, at level `level1 + level2`.
#[allow(clippy::too_many_arguments)]
pub fn secure_mul<T: Transport>(
    s: &mut Session<T>,
    case: OperandCase,
    i1: VarKey,
    i2: VarKey,
    j: VarKey,
    level1: u32,
    level2: u32,
) -> Result<(), ProtocolError> {
    let pk = s.evaluator.pk.clone();
    let n = pk.n().clone();
    let out_level = level1 + level2;
    let c = match case {
        OperandCase::HolderEvaluator => {
            let a = s.holder_plain_aligned(i1, level1, level1)?;
            let ca = s.holder_encrypt(&a)?;
            let ca = s.send_ciphers_to_evaluator(vec![ca])?.remove(0);
            let b = s.evaluator_plain_aligned(i2, level2, level2)?;
            pk.ct_pt_mul(&ca, &b)?
        }
        OperandCase::InterHolder => {
            // Evaluator blinds x1 additively; the key holder multiplies blindly.
            let (c1, l1) = s.evaluator.store.cipher(i1).map(|(c, l)| (c.clone(), l))?;
            check_level(i1, l1, level1)?;
            let (mask_id, r) = s.evaluator.draw_mask(&n);
            let enc_neg_r = s.evaluator_encrypt(&neg_mod(&r, &n))?;
            let blinded = pk.hom_add(&c1, &enc_neg_r)?;
            let blinded = s.send_ciphers_to_holder(vec![blinded])?.remove(0);

            let a = s.holder_plain_aligned(i2, level2, level2)?;
            let prod = s.holder.sk.public().ct_pt_mul(&blinded, &a)?;
            let prod = s.holder.sk.rerandomize(&prod, &mut s.holder.rng)?;
            let ca = s.holder_encrypt(&a)?;
            let got = s.send_ciphers_to_evaluator(vec![prod, ca])?;

            let r = s.evaluator.masks.retire(mask_id)?;
            let fix = pk.ct_pt_mul(&got[1], &r)?;
            let sum = pk.hom_add(&got[0], &fix)?;
            pk.rerandomize(&sum, &mut s.evaluator.rng)?
        }
        OperandCase::InterEvaluator => {
            let (c1, stored) = s.evaluator.store.cipher(i1)?;
            check_level(i1, stored, level1)?;
            let c1 = c1.clone();
            let b = s.evaluator_plain_aligned(i2, level2, level2)?;
            pk.ct_pt_mul(&c1, &b)?
        }
        OperandCase::InterInter => {
            let (c1, l1) = s.evaluator.store.cipher(i1).map(|(c, l)| (c.clone(), l))?;
            check_level(i1, l1, level1)?;
            let (c2, l2) = s.evaluator.store.cipher(i2).map(|(c, l)| (c.clone(), l))?;
            check_level(i2, l2, level2)?;
            let (id1, r1) = s.evaluator.draw_mask(&n);
            let (id2, r2) = s.evaluator.draw_mask(&n);
            let e1 = s.evaluator_encrypt(&r1)?;
            let e2 = s.evaluator_encrypt(&r2)?;
            let b1 = pk.hom_add(&c1, &e1)?;
            let b2 = pk.hom_add(&c2, &e2)?;
            let got = s.send_ciphers_to_holder(vec![b1, b2])?;

            let v1 = s.holder_decrypt(&got[0], &[id1], DecryptPurpose::Masked)?;
            let prod = s.holder.sk.public().ct_pt_mul(&got[1], &v1)?;
            let prod = s.holder.sk.rerandomize(&prod, &mut s.holder.rng)?;
            let prod = s.send_ciphers_to_evaluator(vec![prod])?.remove(0);

            let r1 = s.evaluator.masks.retire(id1)?;
            let r2 = s.evaluator.masks.retire(id2)?;
            let mut acc = pk.add_plain(&prod, &neg_mod(&(&r1 * &r2), &n))?;
            acc = pk.hom_add(&acc, &pk.ct_pt_mul(&c1, &neg_mod(&r2, &n))?)?;
            pk.hom_add(&acc, &pk.ct_pt_mul(&c2, &neg_mod(&r1, &n))?)?
        }
    };
    s.store_result(j, c, out_level);
    Ok(())
}

/// Where the final value of a computation sits before it is revealed.
enum OutputValue {
    AtEvaluator(Ciphertext),
    HolderPlain(BigUint),
    EvaluatorPlain(BigUint),
}

fn reveal_output<T: Transport>(
    s: &mut Session<T>,
    out: OutputValue,
    level: u32,
    reveal: Reveal,
) -> Result<Revealed, ProtocolError> {
    let n = s.evaluator.pk.n().clone();
    let sb = s.scale_bits();
    let dec = |v: &BigUint| decode(v, sb, level, &n);
    let mut res = Revealed::default();
    match out {
        OutputValue::AtEvaluator(c) => match reveal {
            Reveal::ToHolder | Reveal::ToBoth => {
                let c = s.evaluator.pk.rerandomize(&c, &mut s.evaluator.rng)?;
                let c = s.send_ciphers_to_holder(vec![c])?.remove(0);
                let v = s.holder_decrypt(&c, &[], DecryptPurpose::Output)?;
                res.holder = Some(dec(&v));
                if reveal == Reveal::ToBoth {
                    let got = s.send_plain_to_evaluator(vec![v])?;
                    res.evaluator = Some(dec(&got[0]));
                }
            }
            Reveal::ToEvaluator => {
                let (id, r) = s.evaluator.draw_mask(&n);
                let er = s.evaluator_encrypt(&r)?;
                let blinded = s.evaluator.pk.hom_add(&c, &er)?;
                let blinded = s.send_ciphers_to_holder(vec![blinded])?.remove(0);
                let v = s.holder_decrypt(&blinded, &[id], DecryptPurpose::Masked)?;
                let got = s.send_plain_to_evaluator(vec![v])?;
                let r = s.evaluator.masks.retire(id)?;
                let v = (&got[0] + neg_mod(&r, &n)) % &n;
                res.evaluator = Some(dec(&v));
            }
        },
        OutputValue::HolderPlain(v) => {
            if reveal != Reveal::ToEvaluator {
                res.holder = Some(dec(&v));
            }
            if reveal != Reveal::ToHolder {
                let got = s.send_plain_to_evaluator(vec![v])?;
                res.evaluator = Some(dec(&got[0]));
            }
        }
        OutputValue::EvaluatorPlain(v) => {
            if reveal != Reveal::ToHolder {
                res.evaluator = Some(dec(&v));
            }
            if reveal != Reveal::ToEvaluator {
                let got = s.send_plain_to_holder(vec![v])?;
                res.holder = Some(dec(&got[0]));
            }
        }
    }
    Ok(res)
}

fn owned_value(g: &Gate, inputs: &HashMap<VarKey, f64>) -> Result<f64, ProtocolError> {
    match g {
        Gate::Input { var, .. } => inputs.get(var).copied().ok_or(ProtocolError::MissingVariable(*var)),
        Gate::Local { expr, .. } => Ok(expr.eval(inputs)?),
        _ => unreachable!("only owned gates have values"),
    }
}

fn check_capacity(key_bits: u32, scale_bits: u32, level: u32, value_bound: f64) -> Result<(), ProtocolError> {
    if !value_bound.is_finite() || value_bound <= 0.0 {
        return Err(ProtocolError::InvalidInput("value bound must be positive".into()));
    }
    // Need n > 2 S^l B, and n >= 2^(key_bits - 1).
    let need = 1.0 + f64::from(scale_bits * level) + value_bound.log2();
    if need > f64::from(key_bits - 1) {
        return Err(ProtocolError::Level(format!(
            "level {level} results need {need:.1} bits, modulus has {key_bits}"
        )));
    }
    Ok(())
}

/// Evaluates a two-party circuit; every party's inputs must be set beforehand.
///
/// `value_bound` bounds the magnitude of every intermediate value.
pub fn secure_poly<T: Transport>(
    s: &mut Session<T>,
    circuit: &Circuit,
    reveal: Reveal,
    value_bound: f64,
) -> Result<Revealed, ProtocolError> {
    let c = local_compute(circuit);
    let levels = compute_levels(&c);
    let out = c.output();
    let n = s.evaluator.pk.n().clone();
    let sb = s.scale_bits();
    check_capacity(s.evaluator.pk.key_bits(), sb, levels.max(), value_bound)?;

    s.holder.store.clear();
    s.evaluator.store.clear();
    for (i, g) in c.gates().iter().enumerate() {
        let key = i as VarKey;
        match g.owner() {
            Some(Party::KeyHolder) => {
                let x = owned_value(g, &s.holder.inputs)?;
                let level = levels.level(i);
                let value = encode_at(x, sb, level, &n)?;
                s.holder.store.insert(key, StoredValue::Plain { value, level });
            }
            Some(Party::Evaluator) => {
                let x = owned_value(g, &s.evaluator.inputs)?;
                let level = levels.level(i);
                let value = encode_at(x, sb, level, &n)?;
                s.evaluator.store.insert(key, StoredValue::Plain { value, level });
            }
            None => {}
        }
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Kind {
        Holder,
        Evaluator,
        Inter,
    }
    let kind = |g: &Gate| match g.owner() {
        Some(Party::KeyHolder) => Kind::Holder,
        Some(Party::Evaluator) => Kind::Evaluator,
        None => Kind::Inter,
    };
    for (i, g) in c.gates().iter().enumerate() {
        if g.owner().is_some() {
            continue;
        }
        let w = &c.wires()[i];
        let (mut a, mut b) = (w[0], w[1]);
        let (ka, kb) = (kind(&c.gates()[a]), kind(&c.gates()[b]));
        let case = match (ka, kb) {
            (Kind::Holder, Kind::Evaluator) => OperandCase::HolderEvaluator,
            (Kind::Evaluator, Kind::Holder) => {
                std::mem::swap(&mut a, &mut b);
                OperandCase::HolderEvaluator
            }
            (Kind::Inter, Kind::Holder) => OperandCase::InterHolder,
            (Kind::Holder, Kind::Inter) => {
                std::mem::swap(&mut a, &mut b);
                OperandCase::InterHolder
            }
            (Kind::Inter, Kind::Evaluator) => OperandCase::InterEvaluator,
            (Kind::Evaluator, Kind::Inter) => {
                std::mem::swap(&mut a, &mut b);
                OperandCase::InterEvaluator
            }
            (Kind::Inter, Kind::Inter) => OperandCase::InterInter,
            _ => return Err(ProtocolError::NotCompacted(i)),
        };
        let (la, lb) = (levels.level(a), levels.level(b));
        let (ka, kb, kj) = (a as VarKey, b as VarKey, i as VarKey);
        match g {
            Gate::Add => secure_add(s, case, ka, kb, kj, la, lb, levels.level(i))?,
            Gate::Mul => secure_mul(s, case, ka, kb, kj, la, lb)?,
            _ => unreachable!(),
        }
    }

    let out_key = out as VarKey;
    let value = match c.gates()[out].owner() {
        Some(Party::KeyHolder) => OutputValue::HolderPlain(s.holder.store.plain(out_key)?.0.clone()),
        Some(Party::Evaluator) => OutputValue::EvaluatorPlain(s.evaluator.store.plain(out_key)?.0.clone()),
        None => OutputValue::AtEvaluator(s.evaluator.store.cipher(out_key)?.0.clone()),
    };
    reveal_output(s, value, levels.level(out), reveal)
}

/// `f = sum_i h_holder_i * h_evaluator_i + g_holder + g_evaluator`.
#[derive(Clone, Debug, Default)]
pub struct BipartiteDecomposition {
    pub terms: Vec<(Expr, Expr)>,
    pub holder_offset: Option<Expr>,
    pub evaluator_offset: Option<Expr>,
}

/// One-round evaluation of a bipartite decomposition at level 2.
pub fn bipartite_compute<T: Transport>(
    s: &mut Session<T>,
    d: &BipartiteDecomposition,
    reveal: Reveal,
    value_bound: f64,
) -> Result<Revealed, ProtocolError> {
    let n = s.evaluator.pk.n().clone();
    let sb = s.scale_bits();
    check_capacity(s.evaluator.pk.key_bits(), sb, 2, value_bound)?;
    let scale = BigUint::from(1u32) << sb;

    let mut plain = Vec::with_capacity(d.terms.len() + 1);
    for (h, _) in &d.terms {
        plain.push(encode_at(h.eval(&s.holder.inputs)?, sb, 1, &n)?);
    }
    if let Some(g) = &d.holder_offset {
        plain.push(encode_at(g.eval(&s.holder.inputs)?, sb, 1, &n)? * &scale % &n);
    }
    let cts = s.holder.sk.encrypt_batch(&plain, &mut s.holder.rng)?;
    let cts = s.send_ciphers_to_evaluator(cts)?;

    let pk = s.evaluator.pk.clone();
    let mut acc = pk.zero_ciphertext();
    for ((_, h), c) in d.terms.iter().zip(&cts) {
        let hb = encode_at(h.eval(&s.evaluator.inputs)?, sb, 1, &n)?;
        acc = pk.hom_add(&acc, &pk.ct_pt_mul(c, &hb)?)?;
    }
    if d.holder_offset.is_some() {
        acc = pk.hom_add(&acc, cts.last().expect("offset ciphertext"))?;
    }
    if let Some(g) = &d.evaluator_offset {
        let gb = encode_at(g.eval(&s.evaluator.inputs)?, sb, 1, &n)? * &scale % &n;
        acc = pk.add_plain(&acc, &gb)?;
    }
    reveal_output(s, OutputValue::AtEvaluator(acc), 2, reveal)
}
