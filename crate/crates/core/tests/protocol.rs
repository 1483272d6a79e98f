use std::collections::HashMap;
use std::sync::OnceLock;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use secsoreg::circuit::{
    compute_levels, eval_plaintext, Circuit, CircuitBuilder, Expr, Party, VarKey,
};
use secsoreg::encoding::{decode, encode_at};
use secsoreg::error::ProtocolError;
use secsoreg::packing::PackingLayout;
use secsoreg::paillier::{keygen_seeded, SecretKey};
use secsoreg::protocol::{
    bipartite_compute, secure_add, secure_mul, secure_poly, secure_repack, BipartiteDecomposition, DecryptPurpose,
    OperandCase, RepackMode, Reveal, Session, StoredValue,
};
use secsoreg::encoding::EncodingParams;
use secsoreg::transport::{Direction, FrameKind, Transport};

const SB: u32 = 23;
const GRID: f64 = (1u64 << SB) as f64;

fn key() -> &'static SecretKey {
    static K: OnceLock<SecretKey> = OnceLock::new();
    K.get_or_init(|| keygen_seeded(512, 21).unwrap().1)
}

/// A random circuit of depth at most `depth` and its inputs, split by owner.
struct RandomCircuit {
    circuit: Circuit,
    holder: HashMap<VarKey, f64>,
    evaluator: HashMap<VarKey, f64>,
    bound: f64,
}

fn grow(
    b: &mut CircuitBuilder,
    r: &mut ChaCha20Rng,
    depth: u32,
    next: &mut VarKey,
    owners: &mut Vec<(VarKey, Party)>,
) -> (usize, f64) {
    if depth == 0 || r.gen_bool(0.3) {
        // Reuse a variable now and then so shared inputs are exercised.
        if !owners.is_empty() && r.gen_bool(0.2) {
            let (v, p) = owners[r.gen_range(0..owners.len())];
            return (b.input(p, v), 8.0);
        }
        let p = if r.gen_bool(0.5) { Party::KeyHolder } else { Party::Evaluator };
        let v = *next;
        *next += 1;
        owners.push((v, p));
        return (b.input(p, v), 8.0);
    }
    let (x, bx) = grow(b, r, depth - 1, next, owners);
    let (y, by) = grow(b, r, depth - 1, next, owners);
    if r.gen_bool(0.5) {
        (b.add(x, y), bx + by)
    } else {
        (b.mul(x, y), bx * by)
    }
}

fn random_circuit(seed: u64) -> RandomCircuit {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    let mut b = CircuitBuilder::new();
    let mut owners = Vec::new();
    let mut next = 0;
    let depth = r.gen_range(1..=3);
    let (_, bound) = grow(&mut b, &mut r, depth, &mut next, &mut owners);
    let mut holder = HashMap::new();
    let mut evaluator = HashMap::new();
    for (v, p) in owners {
        // Values in (-8, 8) that the fixed-point encoding represents exactly.
        let x = (r.gen_range(-8.0..8.0) * GRID).round() / GRID;
        match p {
            Party::KeyHolder => holder.insert(v, x),
            Party::Evaluator => evaluator.insert(v, x),
        };
    }
    RandomCircuit { circuit: b.finish().unwrap(), holder, evaluator, bound }
}

fn session(seed: u64) -> Session {
    Session::loopback(key().clone(), seed)
}

#[test]
fn random_circuits_match_plaintext() {
    let mut worst: f64 = 0.0;
    for seed in 0..1000 {
        let c = random_circuit(seed);
        let mut s = session(seed);
        s.holder.set_inputs(c.holder.clone());
        s.evaluator.set_inputs(c.evaluator.clone());
        let reveal = [Reveal::ToHolder, Reveal::ToEvaluator, Reveal::ToBoth][seed as usize % 3];
        let got = secure_poly(&mut s, &c.circuit, reveal, c.bound.max(1.0)).unwrap();
        let vals = [got.holder, got.evaluator];
        let vars: HashMap<VarKey, f64> = c.holder.iter().chain(&c.evaluator).map(|(&k, &v)| (k, v)).collect();
        let want = eval_plaintext(&c.circuit, &vars).unwrap();
        let level = compute_levels(&c.circuit).level(c.circuit.output());
        let tol = f64::from(level) / GRID;
        for v in vals.into_iter().flatten() {
            worst = worst.max((v - want).abs() / tol);
        }
        match reveal {
            Reveal::ToHolder => assert!(got.holder.is_some() && got.evaluator.is_none()),
            Reveal::ToEvaluator => assert!(got.holder.is_none() && got.evaluator.is_some()),
            Reveal::ToBoth => assert!(got.holder.is_some() && got.evaluator.is_some()),
        }
    }
    assert!(worst <= 1.0, "worst error {worst} x level/scale");
}

fn put_holder(s: &mut Session, key: VarKey, x: f64, level: u32) {
    let n = s.public_key().n().clone();
    let value = encode_at(x, SB, level, &n).unwrap();
    s.holder.store_mut().insert(key, StoredValue::Plain { value, level });
}

fn put_evaluator(s: &mut Session, key: VarKey, x: f64, level: u32) {
    let n = s.public_key().n().clone();
    let value = encode_at(x, SB, level, &n).unwrap();
    s.evaluator.store_mut().insert(key, StoredValue::Plain { value, level });
}

fn put_cipher(s: &mut Session, key: VarKey, x: f64, level: u32) {
    let pk = s.public_key().clone();
    let value = encode_at(x, SB, level, pk.n()).unwrap();
    let ct = pk.encrypt(&value, s.evaluator.rng()).unwrap();
    s.evaluator.store_mut().insert(key, StoredValue::Cipher { ct, level });
}

fn open(s: &Session, key: VarKey) -> (f64, u32) {
    match s.evaluator.store().get(key).unwrap() {
        StoredValue::Cipher { ct, level } => {
            let v = s.holder.secret_key().decrypt(ct).unwrap();
            (decode(&v, SB, *level, s.public_key().n()), *level)
        }
        other => panic!("expected a ciphertext, got {other:?}"),
    }
}

#[test]
fn add_and_mul_in_every_operand_case() {
    let (a, b) = (0.75, -1.5);
    let cases = [
        OperandCase::HolderEvaluator,
        OperandCase::InterHolder,
        OperandCase::InterEvaluator,
        OperandCase::InterInter,
    ];
    for (i, case) in cases.into_iter().enumerate() {
        let mut s = session(100 + i as u64);
        // Operand 1 at level 2, operand 2 at level 1.
        match case {
            OperandCase::HolderEvaluator => {
                put_holder(&mut s, 1, a, 2);
                put_evaluator(&mut s, 2, b, 1);
            }
            OperandCase::InterHolder => {
                put_cipher(&mut s, 1, a, 2);
                put_holder(&mut s, 2, b, 1);
            }
            OperandCase::InterEvaluator => {
                put_cipher(&mut s, 1, a, 2);
                put_evaluator(&mut s, 2, b, 1);
            }
            OperandCase::InterInter => {
                put_cipher(&mut s, 1, a, 2);
                put_cipher(&mut s, 2, b, 1);
            }
        }
        secure_add(&mut s, case, 1, 2, 10, 2, 1, 2).unwrap();
        secure_mul(&mut s, case, 1, 2, 11, 2, 1).unwrap();
        let (sum, ls) = open(&s, 10);
        let (prod, lp) = open(&s, 11);
        assert_eq!((ls, lp), (2, 3), "{case:?}");
        assert!((sum - (a + b)).abs() < 1e-12, "{case:?}: {sum}");
        assert!((prod - a * b).abs() < 1e-12, "{case:?}: {prod}");
        assert_eq!(s.evaluator.masks().live(), 0, "{case:?} left masks behind");
    }
}

#[test]
fn level_mismatches_are_rejected() {
    let mut s = session(7);
    put_cipher(&mut s, 1, 0.5, 2);
    put_evaluator(&mut s, 2, 0.5, 1);
    assert!(matches!(
        secure_add(&mut s, OperandCase::InterEvaluator, 1, 2, 3, 2, 1, 1),
        Err(ProtocolError::Level(_))
    ));
    assert!(secure_mul(&mut s, OperandCase::InterEvaluator, 1, 2, 3, 1, 1).is_err());
    assert!(matches!(
        secure_mul(&mut s, OperandCase::InterEvaluator, 1, 9, 3, 2, 1),
        Err(ProtocolError::MissingVariable(9))
    ));
    assert!(matches!(
        secure_mul(&mut s, OperandCase::InterInter, 1, 2, 3, 2, 1),
        Err(ProtocolError::WrongKind(2))
    ));
}

#[test]
fn bipartite_matches_plaintext() {
    // f = x0*y10 + (x1*x2)*(y11 + y12) + x0 + y10*y11
    let holder: HashMap<VarKey, f64> = [(0, 0.5), (1, -0.25), (2, 0.8)].into();
    let evaluator: HashMap<VarKey, f64> = [(10, 0.3), (11, -0.6), (12, 0.9)].into();
    let d = BipartiteDecomposition {
        terms: vec![
            (Expr::Var(0), Expr::Var(10)),
            (Expr::mul(Expr::Var(1), Expr::Var(2)), Expr::add(Expr::Var(11), Expr::Var(12))),
        ],
        holder_offset: Some(Expr::Var(0)),
        evaluator_offset: Some(Expr::mul(Expr::Var(10), Expr::Var(11))),
    };
    let want = 0.5 * 0.3 + (-0.25 * 0.8) * (-0.6 + 0.9) + 0.5 + 0.3 * -0.6;
    let mut s = session(8);
    s.holder.set_inputs(holder);
    s.evaluator.set_inputs(evaluator);
    let got = bipartite_compute(&mut s, &d, Reveal::ToBoth, 4.0).unwrap();
    let tol = 2.0 / (1u64 << SB) as f64;
    assert!((got.holder.unwrap() - want).abs() < tol);
    assert_eq!(got.holder, got.evaluator);
    // One round: the holder's ciphertexts go out, the result comes back.
    assert_eq!(s.link.meter(Direction::HolderToEvaluator).units, 3 + 1);
}

fn packed_source(s: &mut Session, layout: &PackingLayout, rows: &[Vec<u32>]) -> Vec<secsoreg::paillier::Ciphertext> {
    let pk = s.public_key().clone();
    rows.iter()
        .map(|r| {
            let vals: Vec<BigUint> = r.iter().map(|&x| BigUint::from(x)).collect();
            pk.encrypt(&layout.pack(&vals).unwrap(), s.evaluator.rng()).unwrap()
        })
        .collect()
}

#[test]
fn repack_moves_slots() {
    let params = EncodingParams::new(8, 16).unwrap();
    let src = PackingLayout::exact(512, 96, params, 1).unwrap();
    let dst = PackingLayout::exact(512, 128, params, 1).unwrap();
    let mut s = session(9);
    s.enable_audit();
    let cts = packed_source(&mut s, &src, &[vec![1, 2, 3], vec![4, 5]]);
    let source_keys = vec![vec![10, 11, 12], vec![13, 14]];
    let target_keys = vec![vec![14, 10], vec![12, 13, 11]];
    let bound = BigUint::from(1u32 << 16);
    let out = secure_repack(&mut s, &cts, &source_keys, &src, &target_keys, &dst, &bound, RepackMode::Exact).unwrap();
    let sk = s.holder.secret_key().clone();
    let rows: Vec<Vec<BigUint>> = out.iter().map(|c| dst.unpack(&sk.decrypt(c).unwrap())).collect();
    let big = |v: &[u32]| v.iter().map(|&x| BigUint::from(x)).collect::<Vec<_>>();
    assert_eq!(rows[0][..2], big(&[5, 1])[..]);
    assert_eq!(rows[1][..3], big(&[3, 4, 2])[..]);
    assert_eq!(s.evaluator.masks().live(), 0);
    let audit = s.audit().unwrap();
    assert_eq!(audit.decryptions.len(), 2);
    assert!(audit.decryptions.iter().all(|d| d.purpose == DecryptPurpose::Masked && !d.masks.is_empty()));

    // Duplicate or unknown keys are refused.
    let dup = vec![vec![10, 11, 12], vec![10, 14]];
    assert!(secure_repack(&mut s, &cts, &dup, &src, &target_keys, &dst, &bound, RepackMode::Exact).is_err());
    let unknown = vec![vec![99]];
    assert!(secure_repack(&mut s, &cts, &source_keys, &src, &unknown, &dst, &bound, RepackMode::Exact).is_err());
}

#[test]
fn repack_mod_q_keeps_residues() {
    let params = EncodingParams::new(8, 16).unwrap();
    let layout = PackingLayout::exact(512, 96, params, 1).unwrap();
    let mut s = session(10);
    let cts = packed_source(&mut s, &layout, &[vec![65_535, 7]]);
    let out = secure_repack(
        &mut s,
        &cts,
        &[vec![0, 1]],
        &layout,
        &[vec![1, 0]],
        &layout,
        &BigUint::from(1u32 << 16),
        RepackMode::ModQ,
    )
    .unwrap();
    let v = layout.unpack_mod_q(&s.holder.secret_key().decrypt(&out[0]).unwrap());
    assert_eq!(v[..2], [BigUint::from(7u32), BigUint::from(65_535u32)]);
}

/// Runs a fixed circuit with the transcript on and returns the session.
fn traced<T: Transport>(mut s: Session<T>, c: &RandomCircuit, reveal: Reveal) -> Session<T> {
    s.enable_audit();
    s.link.record_transcript(true);
    s.holder.set_inputs(c.holder.clone());
    s.evaluator.set_inputs(c.evaluator.clone());
    secure_poly(&mut s, &c.circuit, reveal, c.bound.max(1.0)).unwrap();
    s
}

#[test]
fn holder_sees_only_masked_values_and_evaluator_only_ciphertexts() {
    let n_bits = key().public().n().bits();
    for seed in 0..60 {
        let c = random_circuit(seed);
        let s = traced(session(seed), &c, Reveal::ToHolder);
        let audit = s.audit().unwrap();
        for d in &audit.decryptions {
            match d.purpose {
                DecryptPurpose::Masked => {
                    assert!(!d.masks.is_empty(), "seed {seed}: unmasked intermediate decrypted");
                    // A uniform mask below n hides the value; the result looks like a random residue.
                    assert!(d.plaintext.bits() + 40 > n_bits, "seed {seed}: short masked plaintext");
                }
                DecryptPurpose::Output => assert!(d.masks.is_empty()),
                DecryptPurpose::Aggregate => panic!("no aggregation here"),
            }
        }
        assert!(audit.decryptions.iter().filter(|d| d.purpose == DecryptPurpose::Output).count() <= 1);
        // Ciphertexts leaving the holder are fresh, never echoes of what it received.
        for sent in &audit.holder_sent {
            assert!(audit.holder_received.iter().all(|r| r.value() != sent.value()), "seed {seed}: echoed ciphertext");
        }
        // Nothing travels to the evaluator in the clear when only the holder learns the result.
        for e in s.link.transcript().unwrap() {
            if e.direction == Direction::HolderToEvaluator {
                assert!(matches!(e.kind, FrameKind::Cipher | FrameKind::CipherBatch), "seed {seed}: {e:?}");
            }
        }
        // The only plaintext the holder receives is a result the evaluator computed alone.
        if !audit.plain_to_holder.is_empty() {
            assert_eq!(audit.plain_to_holder.len(), 1);
            assert!(audit.decryptions.is_empty());
        }
        assert_eq!(s.evaluator.masks().live(), 0);
    }
}

#[test]
fn evaluator_reveal_keeps_holder_blind() {
    let c = random_circuit(4242);
    let s = traced(session(1), &c, Reveal::ToEvaluator);
    let audit = s.audit().unwrap();
    assert!(audit.decryptions.iter().all(|d| d.purpose == DecryptPurpose::Masked));
}

#[test]
fn loopback_and_tcp_transcripts_agree() {
    for seed in [3, 17, 99] {
        let c = random_circuit(seed);
        let a = traced(session(seed), &c, Reveal::ToBoth);
        let b = traced(Session::over_tcp(key().clone(), seed).unwrap(), &c, Reveal::ToBoth);
        assert_eq!(a.link.transcript().unwrap(), b.link.transcript().unwrap(), "seed {seed}");
        assert_eq!(a.link.total(), b.link.total());
    }
}

#[test]
fn capacity_is_checked_before_sending() {
    let mut b = CircuitBuilder::new();
    let x = b.input(Party::KeyHolder, 0);
    let y = b.input(Party::Evaluator, 1);
    let mut acc = b.mul(x, y);
    for _ in 0..12 {
        let xy = b.mul(x, y);
        acc = b.mul(acc, xy);
    }
    let c = b.finish().unwrap();
    let mut s = session(5);
    s.holder.set_inputs([(0, 0.5)].into());
    s.evaluator.set_inputs([(1, 0.5)].into());
    assert!(matches!(secure_poly(&mut s, &c, Reveal::ToHolder, 1.0), Err(ProtocolError::Level(_))));
    assert_eq!(s.link.total().messages, 0);
}
