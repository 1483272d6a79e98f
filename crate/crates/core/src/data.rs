//! Rating datasets, social edges, splitting, synthetic data and RMSE.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::DataError;

/// One observed rating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

/// Ratings, social edges and the item-to-seller assignment. Ids are dense.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub ratings: Vec<Rating>,
    /// Undirected edges, each stored once with the smaller id first.
    pub edges: Vec<(usize, usize)>,
    pub item_seller: Vec<usize>,
    pub range: (f64, f64),
}

impl RatingDataset {
    /// Validates ids, duplicates and the rating range; every item goes to seller 0.
    pub fn new(
        n_users: usize,
        n_items: usize,
        ratings: Vec<Rating>,
        edges: Vec<(usize, usize)>,
        range: (f64, f64),
    ) -> Result<Self, DataError> {
        if range.0.is_nan() || range.1.is_nan() || range.0 > range.1 {
            return Err(DataError::Config(format!("bad rating range {range:?}")));
        }
        let mut seen = HashSet::with_capacity(ratings.len());
        for (line, r) in ratings.iter().enumerate() {
            if r.user >= n_users || r.item >= n_items {
                return Err(DataError::Config(format!("rating {line} references unknown ids")));
            }
            if !(r.value >= range.0 && r.value <= range.1) {
                return Err(DataError::Config(format!("rating {line} outside {range:?}")));
            }
            if !seen.insert((r.user, r.item)) {
                return Err(DataError::Duplicate { user: r.user.to_string(), item: r.item.to_string(), line: line + 1 });
            }
        }
        let mut es = BTreeMap::new();
        for &(a, b) in &edges {
            if a >= n_users || b >= n_users {
                return Err(DataError::Config(format!("edge ({a}, {b}) references unknown users")));
            }
            if a != b {
                es.insert((a.min(b), a.max(b)), ());
            }
        }
        Ok(RatingDataset {
            n_users,
            n_items,
            ratings,
            edges: es.into_keys().collect(),
            item_seller: vec![0; n_items],
            range,
        })
    }

    /// Assigns items to `n_sellers` sellers in contiguous blocks.
    pub fn assign_sellers(&mut self, n_sellers: usize) -> Result<(), DataError> {
        if n_sellers == 0 {
            return Err(DataError::Config("need at least one seller".into()));
        }
        let per = self.n_items.div_ceil(n_sellers).max(1);
        self.item_seller = (0..self.n_items).map(|i| i / per).collect();
        Ok(())
    }

    pub fn n_sellers(&self) -> usize {
        self.item_seller.iter().max().map_or(0, |m| m + 1)
    }

    /// Adjacency lists, sorted.
    pub fn friends(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_users];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in adj.iter_mut() {
            l.sort_unstable();
        }
        adj
    }

    pub fn mean_rating(&self, idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        idx.iter().map(|&i| self.ratings[i].value).sum::<f64>() / idx.len() as f64
    }
}

/// Input file kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// `user<TAB>item<TAB>rating`
    RatingsTsv,
    /// `user<TAB>user`
    EdgesTsv,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

type Rows = Vec<(usize, Vec<String>)>;

/// Data lines as (line number, fields); blank lines and `#` comments skipped.
fn read_rows(path: &Path, want: usize) -> Result<(Rows, Vec<String>), DataError> {
    let f = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    let mut comments = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let t = line.trim_end_matches('\r');
        if t.trim().is_empty() {
            continue;
        }
        if let Some(c) = t.strip_prefix('#') {
            comments.push(c.trim().to_string());
            continue;
        }
        let fields: Vec<String> = t.split('\t').map(|s| s.trim().to_string()).collect();
        if fields.len() != want {
            return Err(parse_err(path, i + 1, format!("expected {want} tab-separated fields, got {}", fields.len())));
        }
        if fields.iter().any(|s| s.is_empty()) {
            return Err(parse_err(path, i + 1, "empty field"));
        }
        rows.push((i + 1, fields));
    }
    Ok((rows, comments))
}

/// Dense remapping: numeric ids keep their numeric order, otherwise first appearance.
fn remap<'a>(ids: impl Iterator<Item = &'a str> + Clone) -> HashMap<String, usize> {
    let numeric: Option<Vec<u64>> = ids.clone().map(|s| s.parse::<u64>().ok()).collect();
    let mut out = HashMap::new();
    match numeric {
        Some(mut ns) => {
            ns.sort_unstable();
            ns.dedup();
            for n in ns {
                let len = out.len();
                out.insert(n.to_string(), len);
            }
            // Keys like "007" map through their canonical form.
            for s in ids {
                if !out.contains_key(s) {
                    let v = out[&s.parse::<u64>().expect("numeric").to_string()];
                    out.insert(s.to_string(), v);
                }
            }
        }
        None => {
            for s in ids {
                let len = out.len();
                out.entry(s.to_string()).or_insert(len);
            }
        }
    }
    out
}

fn header_value(comments: &[String], key: &str) -> Option<String> {
    comments.iter().flat_map(|c| c.split_whitespace()).find_map(|kv| kv.strip_prefix(key)?.strip_prefix('=').map(String::from))
}

/// Loads a ratings file and, optionally, an edges file with jointly remapped user ids.
pub fn load_dataset(ratings: &Path, edges: Option<&Path>) -> Result<RatingDataset, DataError> {
    let (rrows, comments) = read_rows(ratings, 3)?;
    let erows = match edges {
        Some(p) => read_rows(p, 2)?.0,
        None => Vec::new(),
    };
    let mut values = Vec::with_capacity(rrows.len());
    for (line, f) in &rrows {
        let v: f64 = f[2].parse().map_err(|_| parse_err(ratings, *line, format!("bad rating {:?}", f[2])))?;
        if !v.is_finite() {
            return Err(parse_err(ratings, *line, "non-finite rating"));
        }
        values.push(v);
    }
    let users = remap(rrows.iter().map(|(_, f)| f[0].as_str()).chain(erows.iter().flat_map(|(_, f)| [f[0].as_str(), f[1].as_str()])));
    let items = remap(rrows.iter().map(|(_, f)| f[1].as_str()));
    let mut seen = HashMap::new();
    let mut out = Vec::with_capacity(rrows.len());
    for ((line, f), v) in rrows.iter().zip(values) {
        let (u, i) = (users[&f[0]], items[&f[1]]);
        if let Some(first) = seen.insert((u, i), *line) {
            return Err(DataError::Duplicate { user: f[0].clone(), item: format!("{} (first on line {first})", f[1]), line: *line });
        }
        out.push(Rating { user: u, item: i, value: v });
    }
    let n_users = users.values().max().map_or(0, |m| m + 1);
    let n_items = items.values().max().map_or(0, |m| m + 1);
    let n_users = header_value(&comments, "users").and_then(|s| s.parse().ok()).unwrap_or(0).max(n_users);
    let n_items = header_value(&comments, "items").and_then(|s| s.parse().ok()).unwrap_or(0).max(n_items);
    let observed = out.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.value), hi.max(r.value)));
    let range = header_value(&comments, "range")
        .and_then(|s| {
            let (a, b) = s.split_once(',')?;
            Some((a.parse().ok()?, b.parse().ok()?))
        })
        .unwrap_or(if out.is_empty() { (0.0, 0.0) } else { observed });
    let edges = erows.iter().map(|(_, f)| (users[&f[0]], users[&f[1]])).collect();
    RatingDataset::new(n_users, n_items, out, edges, range)
}

/// Writes ratings as TSV with a header comment carrying sizes and range.
pub fn write_ratings(d: &RatingDataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# users={} items={} range={},{}", d.n_users, d.n_items, d.range.0, d.range.1)?;
    for r in &d.ratings {
        writeln!(w, "{}\t{}\t{}", r.user, r.item, r.value)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_edges(d: &RatingDataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (a, b) in &d.edges {
        writeln!(w, "{a}\t{b}")?;
    }
    w.flush()?;
    Ok(())
}

/// Train/test partition of rating indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled split with `round(train_fraction * len)` training ratings.
pub fn split(d: &RatingDataset, train_fraction: f64, seed: u64) -> Result<Split, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Config(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..d.ratings.len()).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let cut = (train_fraction * idx.len() as f64).round() as usize;
    let mut test = idx.split_off(cut);
    idx.sort_unstable();
    test.sort_unstable();
    Ok(Split { train: idx, test })
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub k_true: usize,
    pub noise_sd: f64,
    /// Average number of friends per user.
    pub social_density: f64,
    pub ratings_per_user: usize,
    /// Users are drawn around this many community centres; 0 means no structure.
    pub communities: usize,
    /// Spread of users around their community centre, relative to the centre spread.
    pub community_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_items: 500,
            k_true: 4,
            noise_sd: 0.1,
            social_density: 8.0,
            ratings_per_user: 20,
            communities: 10,
            community_spread: 0.3,
            seed: 1,
        }
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    pub users: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
}

/// Ratings `clip(3 + u.v + noise, 1, 5)` from rank-`k_true` factors; friends
/// are each user's nearest neighbours in the true user factors.
pub fn synth_lowrank(cfg: &SynthConfig) -> Result<(RatingDataset, SynthTruth), DataError> {
    if cfg.n_users == 0 || cfg.n_items == 0 || cfg.k_true == 0 {
        return Err(DataError::Config("synthetic sizes must be positive".into()));
    }
    if cfg.ratings_per_user > cfg.n_items {
        return Err(DataError::Config("more ratings per user than items".into()));
    }
    if [cfg.noise_sd, cfg.social_density, cfg.community_spread].iter().any(|x| x.is_nan() || *x < 0.0) {
        return Err(DataError::Config("noise, density and spread must be non-negative".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let k = cfg.k_true;
    // Scale so u.v has unit variance.
    let sd = (1.0 / k as f64).sqrt().sqrt();
    let normal = Normal::new(0.0, sd).expect("valid sd");
    let draw = |rng: &mut ChaCha20Rng| -> Vec<f64> { (0..k).map(|_| normal.sample(rng)).collect() };
    let users: Vec<Vec<f64>> = if cfg.communities == 0 {
        (0..cfg.n_users).map(|_| draw(&mut rng)).collect()
    } else {
        let w = 1.0 / (1.0 + cfg.community_spread * cfg.community_spread).sqrt();
        let centres: Vec<Vec<f64>> = (0..cfg.communities).map(|_| draw(&mut rng)).collect();
        (0..cfg.n_users)
            .map(|u| {
                let c = &centres[u % cfg.communities];
                let j = draw(&mut rng);
                c.iter().zip(&j).map(|(a, b)| w * (a + cfg.community_spread * b)).collect()
            })
            .collect()
    };
    let items: Vec<Vec<f64>> = (0..cfg.n_items).map(|_| draw(&mut rng)).collect();
    let noise = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let mut ratings = Vec::with_capacity(cfg.n_users * cfg.ratings_per_user);
    let all: Vec<usize> = (0..cfg.n_items).collect();
    for (u, uv) in users.iter().enumerate() {
        for &i in all.choose_multiple(&mut rng, cfg.ratings_per_user) {
            let dot: f64 = uv.iter().zip(&items[i]).map(|(a, b)| a * b).sum();
            let e = if cfg.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            ratings.push(Rating { user: u, item: i, value: (3.0 + dot + e).clamp(1.0, 5.0) });
        }
    }
    let mut edges = Vec::new();
    let deg = cfg.social_density.min((cfg.n_users - 1) as f64);
    // Each user links to its floor/ceil(deg/2) nearest neighbours; symmetric closure doubles it.
    let base = (deg / 2.0).floor() as usize;
    let frac = deg / 2.0 - base as f64;
    for (u, uv) in users.iter().enumerate() {
        let extra = usize::from(rng.gen::<f64>() < frac);
        let take = base + extra;
        if take == 0 {
            continue;
        }
        let mut d: Vec<(f64, usize)> = users
            .iter()
            .enumerate()
            .filter(|&(v, _)| v != u)
            .map(|(v, w)| (uv.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum(), v))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(d.iter().take(take).map(|&(_, v)| (u, v)));
    }
    let d = RatingDataset::new(cfg.n_users, cfg.n_items, ratings, edges, (1.0, 5.0))?;
    Ok((d, SynthTruth { users, items }))
}

/// Root mean squared error of `predict` over the given ratings.
pub fn rmse(ratings: &[Rating], mut predict: impl FnMut(usize, usize) -> f64) -> Result<f64, DataError> {
    if ratings.is_empty() {
        return Err(DataError::EmptySet);
    }
    let s: f64 = ratings
        .iter()
        .map(|r| {
            let e = predict(r.user, r.item) - r.value;
            e * e
        })
        .sum();
    Ok((s / ratings.len() as f64).sqrt())
}

/// The ratings at the given indices.
pub fn select(d: &RatingDataset, idx: &[usize]) -> Vec<Rating> {
    idx.iter().map(|&i| d.ratings[i]).collect()
}
