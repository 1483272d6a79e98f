//! Training driver: plaintext or secure SGD over a rating dataset.
//!
//! Step scheduling (user order, item chunks, friend samples) comes from its own
//! seeded generator, separate from cryptographic randomness, so a plaintext run
//! and a secure run from the same seed visit identical steps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::model::SoRegModel;
use super::{
    encrypt_friend_embedding, inject_friend_embeddings, plaintext_sgd_step, secure_sgd_bipartite, secure_sgd_natural,
    GradientAggregator, SgdConfig, StepBatch, ThresholdPool, UserStep,
};
use crate::data::{rmse, select, RatingDataset, Split};
use crate::error::TrainError;
use crate::paillier::{keygen_seeded, SecretKey};
use crate::protocol::Session;

/// Which gradient computation a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Plain,
    Bipartite,
    BipartitePacked,
    Natural,
    NaturalPacked,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Plain, Method::Bipartite, Method::BipartitePacked, Method::Natural, Method::NaturalPacked];

    pub fn is_secure(self) -> bool {
        self != Method::Plain
    }

    pub fn is_packed(self) -> bool {
        matches!(self, Method::BipartitePacked | Method::NaturalPacked)
    }

    pub fn is_natural(self) -> bool {
        matches!(self, Method::Natural | Method::NaturalPacked)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Plain => "plain",
            Method::Bipartite => "bipartite",
            Method::BipartitePacked => "bipartite-packed",
            Method::Natural => "pader",
            Method::NaturalPacked => "pader-packed",
        })
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown method {s:?}")))
    }
}

/// Build an [`SgdConfig`] sized for at most `n` items, `k` dimensions, `m` friends.
pub fn sgd_config(method: Method, key_bits: u32, n: usize, k: usize, m: usize, lambda_s: f64) -> Result<SgdConfig, TrainError> {
    let packed = method.is_packed();
    Ok(if method.is_natural() {
        SgdConfig::natural(key_bits, n, k, m, packed, lambda_s)?
    } else {
        SgdConfig::bipartite(key_bits, n, k, m, packed, lambda_s)?
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Latent dimension; embeddings carry two more coordinates for biases.
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lambda_u: f64,
    pub lambda_v: f64,
    pub lambda_s: f64,
    pub max_items: usize,
    pub max_friends: usize,
    pub threshold: usize,
    pub init_sd: f64,
    pub key_bits: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Plain,
            dim: 8,
            epochs: 5,
            lr: 0.003,
            lambda_u: 0.0,
            lambda_v: 0.0,
            lambda_s: 0.0,
            max_items: 8,
            max_friends: 10,
            threshold: 2,
            init_sd: 0.1,
            key_bits: 512,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_rmse: f64,
    pub valid_rmse: f64,
    pub seconds: f64,
    /// Bytes metered on user-seller links during the epoch.
    pub bytes: u64,
    pub steps: usize,
}

/// Per-seller state: keys and the item-gradient pools.
struct Seller {
    sk: Option<SecretKey>,
    encrypted: Option<GradientAggregator>,
    plain: ThresholdPool<Vec<f64>>,
}

/// Trains a model; `on_epoch` sees each epoch's statistics as they finish.
pub fn train(
    data: &RatingDataset,
    split: &Split,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(SoRegModel, Vec<EpochStats>), TrainError> {
    if cfg.max_items == 0 || cfg.epochs == 0 {
        return Err(TrainError::Config("epochs and items per step must be positive".into()));
    }
    if split.train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mean = data.mean_rating(&split.train);
    let mut model = SoRegModel::new(
        data.n_users,
        data.n_items,
        cfg.dim,
        mean,
        (cfg.lambda_u, cfg.lambda_v, cfg.lambda_s),
        cfg.lr,
        cfg.init_sd,
        cfg.seed,
    )?;
    let width = model.width();
    let sgd = if cfg.method.is_secure() {
        Some(sgd_config(cfg.method, cfg.key_bits, cfg.max_items, width, cfg.max_friends, cfg.lambda_s)?)
    } else {
        None
    };
    let n_sellers = data.n_sellers().max(1);
    let mut sellers = Vec::with_capacity(n_sellers);
    for s in 0..n_sellers {
        let (sk, encrypted) = if cfg.method.is_secure() {
            let (pk, sk) = keygen_seeded(cfg.key_bits, cfg.seed.wrapping_add(1000 + s as u64))?;
            (Some(sk), Some(GradientAggregator::new(pk, cfg.threshold)?))
        } else {
            (None, None)
        };
        sellers.push(Seller { sk, encrypted, plain: ThresholdPool::new(cfg.threshold)? });
    }

    // Training ratings grouped by user, then seller.
    let mut by_user: BTreeMap<usize, BTreeMap<usize, Vec<(usize, f64)>>> = BTreeMap::new();
    for &i in &split.train {
        let r = data.ratings[i];
        by_user
            .entry(r.user)
            .or_default()
            .entry(data.item_seller[r.item])
            .or_default()
            .push((r.item, r.value - mean));
    }
    let friends = data.friends();
    let train_set = select(data, &split.train);
    let valid_set = select(data, &split.test);

    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut step_no: u64 = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut sched = ChaCha20Rng::seed_from_u64(cfg.seed ^ (0x5eed_0000 + epoch as u64));
        let mut crypto = ChaCha20Rng::seed_from_u64(cfg.seed ^ (0xc0de_0000 + epoch as u64));
        let mut users: Vec<usize> = by_user.keys().copied().collect();
        users.shuffle(&mut sched);
        let mut bytes = 0u64;
        let mut steps = 0usize;
        for u in users {
            for (&seller, rated) in &by_user[&u] {
                let mut rated = rated.clone();
                rated.shuffle(&mut sched);
                for chunk in rated.chunks(cfg.max_items) {
                    let mut fr = friends[u].clone();
                    fr.shuffle(&mut sched);
                    fr.truncate(cfg.max_friends);
                    step_no += 1;
                    steps += 1;
                    bytes += run_step(&mut model, &mut sellers[seller], sgd.as_ref(), u, chunk, &fr, step_no, &mut crypto, cfg)?;
                }
            }
        }
        if !model.is_finite() {
            return Err(TrainError::Diverged { epoch, what: "embedding".into() });
        }
        let train_rmse = rmse(&train_set, |u, i| model.predict(u, i))?;
        let valid_rmse = if valid_set.is_empty() { f64::NAN } else { rmse(&valid_set, |u, i| model.predict(u, i))? };
        if !train_rmse.is_finite() {
            return Err(TrainError::Diverged { epoch, what: "training loss".into() });
        }
        let st = EpochStats { epoch: epoch + 1, train_rmse, valid_rmse, seconds: started.elapsed().as_secs_f64(), bytes, steps };
        on_epoch(&st);
        stats.push(st);
    }
    Ok((model, stats))
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    model: &mut SoRegModel,
    seller: &mut Seller,
    sgd: Option<&SgdConfig>,
    user: usize,
    chunk: &[(usize, f64)],
    friends: &[usize],
    step_no: u64,
    crypto: &mut ChaCha20Rng,
    cfg: &TrainConfig,
) -> Result<u64, TrainError> {
    let items: Vec<Vec<f64>> = chunk.iter().map(|&(i, _)| model.items[i].clone()).collect();
    let ratings: Vec<f64> = chunk.iter().map(|&(_, r)| r).collect();
    let weights = vec![1.0; chunk.len()];
    let u = model.users[user].clone();

    let Some(sgd) = sgd else {
        let batch = StepBatch { ratings, weights, friends: friends.iter().map(|&f| model.users[f].clone()).collect() };
        let g = plaintext_sgd_step(&u, &items, &batch, cfg.lambda_s)?;
        model.step_user(user, &g.user);
        for (&(item, _), gv) in chunk.iter().zip(g.items) {
            let released = seller.plain.submit(item, user, gv, |acc, g| {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                Ok::<_, TrainError>(())
            })?;
            if let Some((sum, _)) = released {
                model.step_item(item, &sum);
            }
        }
        return Ok(0);
    };

    let sk = seller.sk.as_ref().expect("secure run has keys").clone();
    let pk = sk.public().clone();
    let mut session = Session::loopback(sk, cfg.seed ^ step_no.wrapping_mul(0x2545_f491_4f6c_dd1d));
    // Friends encrypt their own embeddings under the seller's key.
    let friend_cts = friends
        .iter()
        .map(|&f| encrypt_friend_embedding(&pk, &model.users[f], sgd, crypto))
        .collect::<Result<Vec<_>, _>>()?;
    let keys = inject_friend_embeddings(&mut session, friend_cts, u.len(), sgd)?;
    let step = UserStep { embedding: &u, ratings: &ratings, weights: &weights, friends: &keys };
    let out = if cfg.method.is_natural() {
        secure_sgd_natural(&mut session, &step, &items, sgd)?
    } else {
        secure_sgd_bipartite(&mut session, &step, &items, sgd)?
    };
    model.step_user(user, &out.user_grad);
    let agg = seller.encrypted.as_mut().expect("secure run has an aggregator");
    for (&(item, _), g) in chunk.iter().zip(out.item_grads) {
        if let Some(sum) = agg.submit(user, item, g)? {
            let grad = sum.open(session.holder.secret_key())?;
            model.step_item(item, &grad);
        }
    }
    Ok(session.link.total().bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_lowrank, SynthConfig};

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn plain_training_reduces_rmse() {
        let (d, _) = synth_lowrank(&SynthConfig { n_users: 60, n_items: 80, ..Default::default() }).unwrap();
        let s = split(&d, 0.8, 1).unwrap();
        let cfg = TrainConfig { lr: 0.02, epochs: 15, ..Default::default() };
        let (_, st) = train(&d, &s, &cfg, |_| {}).unwrap();
        assert!(st.last().unwrap().train_rmse < st[0].train_rmse);
        assert_eq!(st.len(), 15);
    }

    #[test]
    fn noiseless_data_is_fit_closely() {
        let (d, _) = synth_lowrank(&SynthConfig {
            n_users: 40,
            n_items: 40,
            k_true: 2,
            noise_sd: 0.0,
            ratings_per_user: 30,
            social_density: 0.0,
            communities: 0,
            ..Default::default()
        })
        .unwrap();
        let s = split(&d, 0.9, 1).unwrap();
        let cfg = TrainConfig { lr: 0.05, epochs: 300, dim: 4, init_sd: 0.3, ..Default::default() };
        let (_, st) = train(&d, &s, &cfg, |_| {}).unwrap();
        assert!(st.last().unwrap().train_rmse < 0.1, "{:?}", st.last());
    }

    #[test]
    fn deterministic() {
        let (d, _) = synth_lowrank(&SynthConfig { n_users: 20, n_items: 30, ..Default::default() }).unwrap();
        let s = split(&d, 0.8, 1).unwrap();
        let cfg = TrainConfig { epochs: 2, lambda_s: 0.5, ..Default::default() };
        let a = train(&d, &s, &cfg, |_| {}).unwrap();
        let b = train(&d, &s, &cfg, |_| {}).unwrap();
        assert_eq!(a.0, b.0);
    }
}
