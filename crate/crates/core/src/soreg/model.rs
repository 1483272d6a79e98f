//! Factor model with biases folded into the embeddings.
//!
//! User rows are `[latent.., b_u, 1]` and item rows `[latent.., 1, b_i]`, so
//! `mean + u . v = mean + latent dot + b_u + b_i`.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::DataError;

#[derive(Clone, Debug, PartialEq)]
pub struct SoRegModel {
    pub dim: usize,
    /// Global rating mean subtracted before training.
    pub mean: f64,
    pub users: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
    pub lambda_u: f64,
    pub lambda_v: f64,
    pub lambda_s: f64,
    pub lr: f64,
}

impl SoRegModel {
    /// Latent coordinates drawn from `N(0, init_sd^2)`, biases zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_users: usize,
        n_items: usize,
        dim: usize,
        mean: f64,
        (lambda_u, lambda_v, lambda_s): (f64, f64, f64),
        lr: f64,
        init_sd: f64,
        seed: u64,
    ) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::Config("embedding dimension must be at least 1".into()));
        }
        let finite = [mean, lambda_u, lambda_v, lambda_s, lr, init_sd].iter().all(|x| x.is_finite());
        if !finite || lambda_u < 0.0 || lambda_v < 0.0 || lambda_s < 0.0 || lr <= 0.0 || init_sd < 0.0 {
            return Err(DataError::Config("hyperparameters must be finite, non-negative, lr positive".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, init_sd).map_err(|e| DataError::Config(e.to_string()))?;
        let mut row = |constant_at: usize| -> Vec<f64> {
            let mut r: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            r.extend([0.0, 0.0]);
            r[constant_at] = 1.0;
            r
        };
        let users = (0..n_users).map(|_| row(dim + 1)).collect();
        let items = (0..n_items).map(|_| row(dim)).collect();
        Ok(SoRegModel { dim, mean, users, items, lambda_u, lambda_v, lambda_s, lr })
    }

    /// Length of an embedding row.
    pub fn width(&self) -> usize {
        self.dim + 2
    }

    pub fn predict(&self, user: usize, item: usize) -> f64 {
        self.mean + dot(&self.users[user], &self.items[item])
    }

    /// `u <- (1 - 2 lr lambda_u) u - lr grad`, leaving the constant coordinate at 1.
    pub fn step_user(&mut self, user: usize, grad: &[f64]) {
        let shrink = 1.0 - 2.0 * self.lr * self.lambda_u;
        let c = self.dim + 1;
        let lr = self.lr;
        for (p, (x, g)) in self.users[user].iter_mut().zip(grad).enumerate() {
            if p != c {
                *x = shrink * *x - lr * g;
            }
        }
    }

    pub fn step_item(&mut self, item: usize, grad: &[f64]) {
        let shrink = 1.0 - 2.0 * self.lr * self.lambda_v;
        let c = self.dim;
        let lr = self.lr;
        for (p, (x, g)) in self.items[item].iter_mut().zip(grad).enumerate() {
            if p != c {
                *x = shrink * *x - lr * g;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(&self.items).flatten().all(|x| x.is_finite())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# soreg model v1");
        let _ = writeln!(s, "dim {} users {} items {}", self.dim, self.users.len(), self.items.len());
        let _ = writeln!(s, "mean {}", self.mean);
        let _ = writeln!(
            s,
            "lambda_u {} lambda_v {} lambda_s {} lr {}",
            self.lambda_u, self.lambda_v, self.lambda_s, self.lr
        );
        for (tag, rows) in [("u", &self.users), ("i", &self.items)] {
            for (id, r) in rows.iter().enumerate() {
                let _ = write!(s, "{tag} {id}");
                for x in r {
                    let _ = write!(s, " {x}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let err = |line: usize, msg: &str| DataError::Parse { path: "<model>".into(), line, msg: msg.into() };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let mut header = |want: &[&str]| -> Result<Vec<f64>, DataError> {
            let (i, l) = lines.next().ok_or_else(|| err(0, "truncated header"))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 2 * want.len() || f.iter().step_by(2).zip(want).any(|(a, b)| a != b) {
                return Err(err(i + 1, &format!("expected fields {want:?}")));
            }
            f.iter().skip(1).step_by(2).map(|x| x.parse::<f64>().map_err(|_| err(i + 1, "bad number"))).collect()
        };
        let sizes = header(&["dim", "users", "items"])?;
        let mean = header(&["mean"])?[0];
        let hp = header(&["lambda_u", "lambda_v", "lambda_s", "lr"])?;
        let (dim, nu, ni) = (sizes[0] as usize, sizes[1] as usize, sizes[2] as usize);
        let mut users = vec![Vec::new(); nu];
        let mut items = vec![Vec::new(); ni];
        for (i, l) in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != dim + 4 {
                return Err(err(i + 1, "wrong row width"));
            }
            let id: usize = f[1].parse().map_err(|_| err(i + 1, "bad id"))?;
            let row = f[2..].iter().map(|x| x.parse::<f64>().map_err(|_| err(i + 1, "bad number"))).collect::<Result<Vec<_>, _>>()?;
            let slot = match f[0] {
                "u" => users.get_mut(id),
                "i" => items.get_mut(id),
                _ => return Err(err(i + 1, "row tag must be u or i")),
            };
            *slot.ok_or_else(|| err(i + 1, "id out of range"))? = row;
        }
        if users.iter().chain(&items).any(|r| r.len() != dim + 2) {
            return Err(err(0, "missing rows"));
        }
        Ok(SoRegModel { dim, mean, users, items, lambda_u: hp[0], lambda_v: hp[1], lambda_s: hp[2], lr: hp[3] })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
