use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use secsoreg::error::{AggregationError, ProtocolError};
use secsoreg::paillier::{keygen_seeded, SecretKey};
use secsoreg::protocol::{Reveal, Session};
use secsoreg::soreg::train::{sgd_config, Method};
use secsoreg::soreg::{
    aggregate_item_gradients, encrypt_friend_embedding, inject_friend_embeddings, plaintext_sgd_step, secure_infer,
    secure_sgd_bipartite, secure_sgd_natural, Contribution, EncryptedGradient, GradientAggregator, InferMode,
    SecureStepOutput, SgdConfig, StepBatch, UserStep,
};

const TOL: f64 = 1.0 / (1u64 << 18) as f64;

fn key() -> &'static SecretKey {
    static K: OnceLock<SecretKey> = OnceLock::new();
    K.get_or_init(|| keygen_seeded(512, 11).unwrap().1)
}

fn other_key() -> &'static SecretKey {
    static K: OnceLock<SecretKey> = OnceLock::new();
    K.get_or_init(|| keygen_seeded(512, 12).unwrap().1)
}

struct Case {
    u: Vec<f64>,
    items: Vec<Vec<f64>>,
    ratings: Vec<f64>,
    weights: Vec<f64>,
    friends: Vec<Vec<f64>>,
}

fn case(n: usize, k: usize, m: usize, seed: u64) -> Case {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    let mut v = |k: usize| (0..k).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let u = v(k);
    let items = (0..n).map(|_| v(k)).collect();
    let ratings = v(n).into_iter().map(|x| 2.0 * x).collect();
    let friends = (0..m).map(|_| v(k)).collect();
    Case { u, items, ratings, weights: vec![1.0; n], friends }
}

fn run(method: Method, c: &Case, lambda_s: f64, seed: u64) -> (SecureStepOutput, Session, SgdConfig) {
    let (n, k, m) = (c.items.len(), c.u.len(), c.friends.len());
    let cfg = sgd_config(method, 512, n, k, m, lambda_s).unwrap();
    let sk = key().clone();
    let mut s = Session::loopback(sk, seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed + 99);
    let cts = c.friends.iter().map(|f| encrypt_friend_embedding(s.public_key(), f, &cfg, &mut rng).unwrap()).collect();
    let keys = inject_friend_embeddings(&mut s, cts, k, &cfg).unwrap();
    let step = UserStep { embedding: &c.u, ratings: &c.ratings, weights: &c.weights, friends: &keys };
    let out = if method == Method::Natural || method == Method::NaturalPacked {
        secure_sgd_natural(&mut s, &step, &c.items, &cfg).unwrap()
    } else {
        secure_sgd_bipartite(&mut s, &step, &c.items, &cfg).unwrap()
    };
    (out, s, cfg)
}

fn max_diff(method: Method, c: &Case, lambda_s: f64, seed: u64) -> f64 {
    let batch = StepBatch { ratings: c.ratings.clone(), weights: c.weights.clone(), friends: c.friends.clone() };
    let want = plaintext_sgd_step(&c.u, &c.items, &batch, lambda_s).unwrap();
    let (out, _, _) = run(method, c, lambda_s, seed);
    let mut d: f64 = 0.0;
    for (a, b) in out.user_grad.iter().zip(&want.user) {
        d = d.max((a - b).abs());
    }
    assert_eq!(out.user_grad.len(), want.user.len());
    assert_eq!(out.item_grads.len(), want.items.len());
    for (g, w) in out.item_grads.iter().zip(&want.items) {
        let got = g.open(key()).unwrap();
        assert_eq!(got.len(), w.len());
        for (a, b) in got.iter().zip(w) {
            d = d.max((a - b).abs());
        }
    }
    d
}

const SECURE: [Method; 4] = [Method::Bipartite, Method::BipartitePacked, Method::Natural, Method::NaturalPacked];

#[test]
fn secure_steps_match_plaintext_small_grid() {
    let mut seed = 0;
    for method in SECURE {
        for (n, k, m) in [(1, 1, 0), (2, 2, 1), (2, 3, 2), (4, 2, 4), (3, 5, 1)] {
            seed += 1;
            let c = case(n, k, m, seed);
            let d = max_diff(method, &c, 0.7, seed);
            assert!(d < TOL, "{method} n={n} k={k} m={m}: diff {d}");
        }
    }
}

#[test]
fn pure_social_term() {
    // No items is not a valid step; use one item with zero weight instead.
    let c = Case { u: vec![0.0], items: vec![vec![0.0]], ratings: vec![0.0], weights: vec![0.0], friends: vec![vec![1.0]] };
    for method in SECURE {
        let (out, _, _) = run(method, &c, 1.0, 3);
        assert!((out.user_grad[0] + 2.0).abs() < TOL, "{method}: {:?}", out.user_grad);
    }
}

#[test]
fn zero_friends_and_self_friend() {
    let base = case(2, 3, 0, 5);
    let with_self = Case { friends: vec![base.u.clone()], ..case(2, 3, 0, 5) };
    for method in SECURE {
        let (a, _, _) = run(method, &base, 0.9, 1);
        let (b, _, _) = run(method, &with_self, 0.9, 1);
        for (x, y) in a.user_grad.iter().zip(&b.user_grad) {
            assert!((x - y).abs() < TOL);
        }
    }
}

#[test]
fn ones_friend_matches_plaintext() {
    let mut c = case(2, 4, 1, 8);
    c.friends = vec![vec![1.0; 4]];
    for method in SECURE {
        assert!(max_diff(method, &c, 0.5, 4) < TOL);
    }
}

#[test]
fn friend_under_wrong_key_is_rejected() {
    let cfg = sgd_config(Method::NaturalPacked, 512, 2, 2, 1, 0.5).unwrap();
    let mut s = Session::loopback(key().clone(), 1);
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let bad = encrypt_friend_embedding(other_key().public(), &[0.1, 0.2], &cfg, &mut rng).unwrap();
    assert!(inject_friend_embeddings(&mut s, vec![bad], 2, &cfg).is_err());
    let short = encrypt_friend_embedding(key().public(), &[0.1, 0.2, 0.3, 0.4, 0.5], &cfg, &mut rng).unwrap();
    assert!(matches!(inject_friend_embeddings(&mut s, vec![short], 2, &cfg), Err(ProtocolError::LayoutMismatch(_))));
}

#[test]
fn packed_natural_rejects_mixed_weights_before_sending() {
    let mut c = case(2, 2, 0, 2);
    c.weights = vec![1.0, 0.5];
    let cfg = sgd_config(Method::NaturalPacked, 512, 2, 2, 0, 0.0).unwrap();
    assert!(cfg.slots() >= 2);
    let mut s = Session::loopback(key().clone(), 1);
    let step = UserStep { embedding: &c.u, ratings: &c.ratings, weights: &c.weights, friends: &[] };
    assert!(secure_sgd_natural(&mut s, &step, &c.items, &cfg).is_err());
    assert_eq!(s.link.total().messages, 0);
    // Unpacked handles arbitrary weights.
    assert!(max_diff(Method::Natural, &c, 0.0, 1) < TOL);
    assert!(max_diff(Method::BipartitePacked, &c, 0.0, 1) < TOL);
}

#[test]
fn oversized_step_fails_before_sending() {
    let c = case(8, 8, 0, 1);
    // Layout sized for 1 item with a forced small slot cannot hold 8 items.
    let cfg = SgdConfig::bipartite(512, 1, 8, 0, true, 0.0).unwrap().with_slot_bits(64).unwrap();
    let mut s = Session::loopback(key().clone(), 1);
    let step = UserStep { embedding: &c.u, ratings: &c.ratings, weights: &c.weights, friends: &[] };
    assert!(secure_sgd_bipartite(&mut s, &step, &c.items, &cfg).is_err());
    assert_eq!(s.link.total().messages, 0);
}

fn units(method: Method, n: usize, k: usize) -> (u64, u64, SgdConfig) {
    let c = case(n, k, 2, 40);
    let (_, s, cfg) = run(method, &c, 0.5, 1);
    let t = s.link.total();
    (t.units, t.transmissions, cfg)
}

#[test]
fn communication_formulas() {
    for n in [2usize, 4, 8] {
        for k in [2usize, 4, 8] {
            let (u, tx, cfg) = units(Method::BipartitePacked, n, k);
            let kp = cfg.chunks(k);
            assert_eq!(u as usize, n * k * kp + 2 * n * kp + n * k + 2 * kp, "bipartite n={n} k={k}");
            assert_eq!(tx, 3);
            let (u, tx, cfg) = units(Method::NaturalPacked, n, k);
            let (np, kp) = (cfg.chunks(n), cfg.chunks(k));
            assert_eq!(u as usize, np * k + np + n + 3 * kp + 2 * n * kp, "natural n={n} k={k}");
            assert_eq!(tx, 5);
            let (u, _, _) = units(Method::Natural, n, k);
            assert_eq!(u as usize, 3 * n * k + n + 3 * k);
            let (u, _, _) = units(Method::Bipartite, n, k);
            assert_eq!(u as usize, n * k * k + 2 * n * k + 2 * k);
        }
    }
}

#[test]
fn aggregation_sums_and_thresholds() {
    let c1 = case(2, 3, 0, 21);
    let c2 = case(2, 3, 0, 22);
    let (o1, _, _) = run(Method::NaturalPacked, &Case { items: c1.items.clone(), ..case(2, 3, 0, 21) }, 0.0, 1);
    let (o2, _, _) = run(Method::NaturalPacked, &Case { items: c1.items.clone(), ..c2 }, 0.0, 2);
    let pk = key().public();
    let items = vec![4usize, 9];
    let a = Contribution { user: 1, items: items.clone(), grads: o1.item_grads.clone() };
    let b = Contribution { user: 2, items: items.clone(), grads: o2.item_grads.clone() };
    assert!(aggregate_item_gradients(pk, 2, std::slice::from_ref(&a)).unwrap().is_none());
    let sum = aggregate_item_gradients(pk, 2, &[a.clone(), b.clone()]).unwrap().unwrap();
    #[allow(clippy::needless_range_loop)]
    for i in 0..2 {
        let want: Vec<f64> = o1.item_grads[i]
            .open(key())
            .unwrap()
            .iter()
            .zip(o2.item_grads[i].open(key()).unwrap())
            .map(|(x, y)| x + y)
            .collect();
        for (g, w) in sum[i].open(key()).unwrap().iter().zip(&want) {
            assert!((g - w).abs() < TOL);
        }
    }
    let mixed = Contribution { items: vec![4, 10], ..b.clone() };
    assert!(matches!(aggregate_item_gradients(pk, 2, &[a.clone(), mixed]), Err(AggregationError::MixedItems)));
    assert!(aggregate_item_gradients(pk, 1, std::slice::from_ref(&a)).is_err());

    let mut agg = GradientAggregator::new(pk.clone(), 2).unwrap();
    assert!(agg.submit(1, 4, o1.item_grads[0].clone()).unwrap().is_none());
    assert!(agg.submit(1, 4, o1.item_grads[0].clone()).unwrap().is_none());
    assert!(agg.submit(2, 4, o2.item_grads[0].clone()).unwrap().is_some());
}

#[test]
fn zero_gradients_aggregate_to_zero() {
    let mut c = case(1, 3, 0, 5);
    c.u = vec![0.0; 3];
    c.ratings = vec![0.0];
    let (o, _, _) = run(Method::BipartitePacked, &c, 0.0, 1);
    let contribs: Vec<Contribution> =
        (0..4).map(|u| Contribution { user: u, items: vec![0], grads: o.item_grads.clone() }).collect();
    let sum: Vec<EncryptedGradient> = aggregate_item_gradients(key().public(), 2, &contribs).unwrap().unwrap();
    assert!(sum[0].open(key()).unwrap().iter().all(|x| *x == 0.0));
}

#[test]
fn inference_examples() {
    for mode in [InferMode::Circuit, InferMode::Packed] {
        let mut s = Session::loopback(key().clone(), 1);
        let r = secure_infer(&mut s, &[1.0, 0.0], &[vec![0.0, 1.0]], mode, Reveal::ToEvaluator).unwrap();
        assert_eq!(r[0].evaluator, Some(0.0));
        assert_eq!(r[0].holder, None);
        let r = secure_infer(&mut s, &[0.5, 0.5], &[vec![0.5, 0.5]], mode, Reveal::ToBoth).unwrap();
        assert_eq!(r[0].evaluator, Some(0.5));
        assert_eq!(r[0].holder, Some(0.5));
    }
}

#[test]
fn inference_matches_dot_products() {
    let c = case(32, 8, 0, 77);
    for mode in [InferMode::Circuit, InferMode::Packed] {
        let mut s = Session::loopback(key().clone(), 1);
        let r = secure_infer(&mut s, &c.u, &c.items, mode, Reveal::ToHolder).unwrap();
        for (got, v) in r.iter().zip(&c.items) {
            let want: f64 = v.iter().zip(&c.u).map(|(a, b)| a * b).sum();
            assert!((got.holder.unwrap() - want).abs() < TOL);
            assert!(got.evaluator.is_none());
        }
    }
}

#[test]
fn single_item_inference_legs() {
    for mode in [InferMode::Circuit, InferMode::Packed] {
        let mut s = Session::loopback(key().clone(), 1);
        secure_infer(&mut s, &[0.3], &[vec![0.7]], mode, Reveal::ToEvaluator).unwrap();
        let t = s.link.total();
        assert_eq!((t.messages, t.units, t.transmissions), (3, 3, 3), "{mode:?}");
    }
}
