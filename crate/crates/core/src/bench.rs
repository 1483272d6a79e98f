//! Benchmark sweeps over step size and embedding dimension.
//!
//! Byte counts come from the metered link and are deterministic for a fixed
//! seed; times are the median of several repetitions.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::encoding::EncodingParams;
use crate::error::{ProtocolError, TrainError};
use crate::packing::PolynomialBound;
use crate::paillier::SecretKey;
use crate::protocol::{Reveal, Session, DEFAULT_SCALE_BITS};
use crate::soreg::train::{sgd_config, Method};
use crate::soreg::{
    encrypt_friend_embedding, inject_friend_embeddings, plaintext_sgd_step, secure_infer, secure_sgd_bipartite,
    secure_sgd_natural, InferMode, SgdConfig, StepBatch, UserStep, SLOT_ALIGN_BITS,
};
use crate::transport::{estimate_wallclock, BandwidthModel};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub method: Method,
    pub items: Vec<usize>,
    pub dims: Vec<usize>,
    pub friends: usize,
    pub scale_bits: u32,
    /// Overrides the slot modulus exponent.
    pub slot_mod_bits: Option<u32>,
    /// Overrides the slot size of packed layouts.
    pub slot_bits: Option<u32>,
    /// Bandwidths in Mbit/s for the wall-clock estimates.
    pub bandwidths_mbps: Vec<u64>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            method: Method::NaturalPacked,
            items: vec![8],
            dims: vec![8],
            friends: 10,
            scale_bits: DEFAULT_SCALE_BITS,
            slot_mod_bits: None,
            slot_bits: None,
            bandwidths_mbps: vec![10, 100],
            reps: 5,
            seed: 1,
        }
    }
}

/// One grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub pure_time_s: f64,
    pub bytes: u64,
    pub units: u64,
    /// `(Mbit/s, seconds)` per configured bandwidth.
    pub estimates: Vec<(u64, f64)>,
    /// `None` when the point ran; otherwise why it could not.
    pub infeasible: Option<String>,
}

/// CSV with a header; one estimate column per bandwidth.
pub fn to_csv(rows: &[BenchRow], bandwidths_mbps: &[u64]) -> String {
    let mut s = String::from("method,n,k,m,pure_time_s,bytes,units");
    for b in bandwidths_mbps {
        let _ = write!(s, ",est_{b}mbps_s");
    }
    s.push_str(",status\n");
    for r in rows {
        let _ = write!(s, "{},{},{},{},{:.6},{},{}", r.method, r.n, r.k, r.m, r.pure_time_s, r.bytes, r.units);
        for b in bandwidths_mbps {
            match r.estimates.iter().find(|(x, _)| x == b) {
                Some((_, t)) => {
                    let _ = write!(s, ",{t:.6}");
                }
                None => s.push(','),
            }
        }
        match &r.infeasible {
            None => s.push_str(",ok\n"),
            Some(why) => {
                let _ = writeln!(s, ",\"infeasible: {}\"", why.replace('"', "'"));
            }
        }
    }
    s
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn random_vec(rng: &mut ChaCha20Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

fn row(cfg: &BenchConfig, n: usize, k: usize, times: Vec<f64>, bytes: u64, units: u64) -> Result<BenchRow, TrainError> {
    let pure = median(times);
    let estimates = cfg
        .bandwidths_mbps
        .iter()
        .map(|&b| Ok((b, estimate_wallclock(bytes, pure, BandwidthModel::mbps(b).map_err(ProtocolError::from)?))))
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(BenchRow { method: cfg.method, n, k, m: cfg.friends, pure_time_s: pure, bytes, units, estimates, infeasible: None })
}

fn infeasible(cfg: &BenchConfig, n: usize, k: usize, why: String) -> BenchRow {
    BenchRow {
        method: cfg.method,
        n,
        k,
        m: cfg.friends,
        pure_time_s: f64::NAN,
        bytes: 0,
        units: 0,
        estimates: Vec::new(),
        infeasible: Some(why),
    }
}

/// Step layout honouring the overrides.
fn step_config(cfg: &BenchConfig, key_bits: u32, n: usize, k: usize) -> Result<SgdConfig, TrainError> {
    if cfg.slot_mod_bits.is_none() && cfg.scale_bits == DEFAULT_SCALE_BITS {
        let c = sgd_config(cfg.method, key_bits, n, k, cfg.friends, 0.5)?;
        return Ok(match cfg.slot_bits {
            Some(b) => c.with_slot_bits(b)?,
            None => c,
        });
    }
    let natural = cfg.method.is_natural();
    let level = if natural { 3 } else { 2 };
    let default_q = if natural { 1 + 3 * cfg.scale_bits + 10 } else { 1 + 2 * cfg.scale_bits + 9 };
    let params = EncodingParams::new(cfg.scale_bits, cfg.slot_mod_bits.unwrap_or(default_q))?;
    let bound = if natural {
        PolynomialBound::natural_sgd(n, k, cfg.friends)
    } else {
        PolynomialBound::bipartite_sgd(n, k, cfg.friends)
    };
    let c = SgdConfig::with_params(key_bits, params, level, &bound, cfg.method.is_packed(), 0.5)?;
    Ok(match cfg.slot_bits {
        Some(b) => c.with_slot_bits(b)?,
        None => c,
    })
}

/// One SGD step per grid point (`--items` by `--dim`).
pub fn bench_train(cfg: &BenchConfig, sk: &SecretKey) -> Result<Vec<BenchRow>, TrainError> {
    let mut rows = Vec::new();
    for &k in &cfg.dims {
        for &n in &cfg.items {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ ((n as u64) << 32 | k as u64));
            let u = random_vec(&mut rng, k);
            let items: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, k)).collect();
            let ratings: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let weights = vec![1.0; n];
            let friends: Vec<Vec<f64>> = (0..cfg.friends).map(|_| random_vec(&mut rng, k)).collect();
            if cfg.method == Method::Plain {
                let batch = StepBatch { ratings: ratings.clone(), weights: weights.clone(), friends: friends.clone() };
                let mut times = Vec::with_capacity(cfg.reps);
                for _ in 0..cfg.reps.max(1) {
                    let t = Instant::now();
                    std::hint::black_box(plaintext_sgd_step(&u, &items, &batch, 0.5)?);
                    times.push(t.elapsed().as_secs_f64());
                }
                rows.push(row(cfg, n, k, times, 0, 0)?);
                continue;
            }
            let sgd = match step_config(cfg, sk.public().key_bits(), n, k) {
                Ok(c) => c,
                Err(e) => {
                    rows.push(infeasible(cfg, n, k, e.to_string()));
                    continue;
                }
            };
            let mut times = Vec::with_capacity(cfg.reps);
            let mut metered = None;
            for rep in 0..cfg.reps.max(1) {
                let mut s = Session::loopback(sk.clone(), cfg.seed.wrapping_add(rep as u64));
                let cts = friends
                    .iter()
                    .map(|f| encrypt_friend_embedding(sk.public(), f, &sgd, &mut rng))
                    .collect::<Result<Vec<_>, _>>()?;
                let keys = inject_friend_embeddings(&mut s, cts, k, &sgd)?;
                let step = UserStep { embedding: &u, ratings: &ratings, weights: &weights, friends: &keys };
                let t = Instant::now();
                let res = if cfg.method.is_natural() {
                    secure_sgd_natural(&mut s, &step, &items, &sgd)
                } else {
                    secure_sgd_bipartite(&mut s, &step, &items, &sgd)
                };
                times.push(t.elapsed().as_secs_f64());
                if let Err(e) = res {
                    metered = Some(Err(e.to_string()));
                    break;
                }
                let tot = s.link.total();
                metered = Some(Ok((tot.bytes, tot.units)));
            }
            match metered.expect("at least one repetition") {
                Ok((bytes, units)) => rows.push(row(cfg, n, k, times, bytes, units)?),
                Err(why) => rows.push(infeasible(cfg, n, k, why)),
            }
        }
    }
    Ok(rows)
}

/// Predictions for `n` items per grid point, revealed to the user.
pub fn bench_infer(cfg: &BenchConfig, sk: &SecretKey) -> Result<Vec<BenchRow>, TrainError> {
    let mut rows = Vec::new();
    for &k in &cfg.dims {
        for &n in &cfg.items {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ ((n as u64) << 32 | k as u64));
            let u = random_vec(&mut rng, k);
            let items: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, k)).collect();
            let mut times = Vec::with_capacity(cfg.reps);
            if cfg.method == Method::Plain {
                for _ in 0..cfg.reps.max(1) {
                    let t = Instant::now();
                    let p: Vec<f64> = items.iter().map(|v| v.iter().zip(&u).map(|(a, b)| a * b).sum()).collect();
                    std::hint::black_box(p);
                    times.push(t.elapsed().as_secs_f64());
                }
                rows.push(row(cfg, n, k, times, 0, 0)?);
                continue;
            }
            let mode = if cfg.method.is_packed() { InferMode::Packed } else { InferMode::Circuit };
            let mut metered = None;
            for rep in 0..cfg.reps.max(1) {
                let mut s = Session::loopback(sk.clone(), cfg.seed.wrapping_add(rep as u64));
                s.set_scale_bits(cfg.scale_bits);
                let t = Instant::now();
                let res = secure_infer(&mut s, &u, &items, mode, Reveal::ToEvaluator);
                times.push(t.elapsed().as_secs_f64());
                if let Err(e) = res {
                    metered = Some(Err(e.to_string()));
                    break;
                }
                let tot = s.link.total();
                metered = Some(Ok((tot.bytes, tot.units)));
            }
            match metered.expect("at least one repetition") {
                Ok((bytes, units)) => rows.push(row(cfg, n, k, times, bytes, units)?),
                Err(why) => rows.push(infeasible(cfg, n, k, why)),
            }
        }
    }
    Ok(rows)
}

/// Slot alignment used by the default layouts, re-exported for reporting.
pub const ALIGN_BITS: u32 = SLOT_ALIGN_BITS;
