//! Command-line front end: key generation, training and benchmark sweeps.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use secsoreg::bench::{bench_infer, bench_train, to_csv, BenchConfig};
use secsoreg::data::{load_dataset, split, synth_lowrank, write_edges, write_ratings, SynthConfig};
use secsoreg::paillier::{keygen, keygen_seeded, SecretKey};
use secsoreg::soreg::train::{train, Method, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "secsoreg", version, args_override_self = true, about = "Private social recommendation training over Paillier encryption")]
struct Cli {
    /// key=value file providing defaults for any flag (flags on the command line win)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for batch encryption
    #[arg(long, global = true, default_value_t = 8)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a key pair: <out>.pub and <out>.key
    Keygen(KeygenArgs),
    /// Per-step SGD cost over a grid of item counts and dimensions
    BenchTrain(BenchArgs),
    /// Prediction cost over a grid of item counts and dimensions
    BenchInfer(BenchArgs),
    /// Train a model and log per-epoch RMSE
    Train(TrainArgs),
    /// Write a synthetic social rating dataset
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct KeygenArgs {
    #[arg(long, default_value_t = 2048)]
    key_bits: u32,
    /// Deterministic keys from this seed (testing only)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// plain, bipartite, bipartite-packed, pader, pader-packed
    #[arg(long, default_value = "pader-packed")]
    method: Method,
    /// Item counts, comma separated
    #[arg(long, action = clap::ArgAction::Set, value_delimiter = ',', default_value = "8")]
    items: Vec<usize>,
    /// Embedding dimensions, comma separated
    #[arg(long, action = clap::ArgAction::Set, value_delimiter = ',', default_value = "8")]
    dim: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    friends: usize,
    #[arg(long, default_value_t = 2048)]
    key_bits: u32,
    /// Secret key file; generated from --seed when absent
    #[arg(long)]
    key: Option<PathBuf>,
    #[arg(long, default_value_t = 23)]
    scale_bits: u32,
    #[arg(long)]
    slot_mod_bits: Option<u32>,
    #[arg(long)]
    slot_bits: Option<u32>,
    /// Bandwidths in Mbit/s for wall-clock estimates, comma separated
    #[arg(long, action = clap::ArgAction::Set, value_delimiter = ',', default_value = "10,100")]
    bandwidth: Vec<u64>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// CSV output; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Ratings TSV (user, item, rating)
    #[arg(long, required_unless_present = "synth")]
    ratings: Option<PathBuf>,
    /// Social edges TSV (user, user)
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Train on the default synthetic dataset instead of files
    #[arg(long)]
    synth: bool,
    #[arg(long, default_value = "plain")]
    method: Method,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.003)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_u: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_v: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_s: f64,
    /// Items per step
    #[arg(long, default_value_t = 8)]
    items: usize,
    /// Friends sampled per step
    #[arg(long, default_value_t = 10)]
    friends: usize,
    #[arg(long, default_value_t = 2)]
    threshold: usize,
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    #[arg(long, default_value_t = 1)]
    sellers: usize,
    #[arg(long, default_value_t = 512)]
    key_bits: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Model checkpoint path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch CSV; stdout when absent
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Average friends per user
    #[arg(long, default_value_t = 8.0)]
    social_density: f64,
    #[arg(long, default_value_t = 20)]
    ratings_per_user: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for ratings.tsv and edges.tsv
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let argv = config::expand_args(std::env::args().collect())?;
    let cli = Cli::parse_from(argv);
    rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global().ok();
    match cli.cmd {
        Command::Keygen(a) => cmd_keygen(&a),
        Command::BenchTrain(a) => cmd_bench(&a, false),
        Command::BenchInfer(a) => cmd_bench(&a, true),
        Command::Train(a) => cmd_train(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn cmd_keygen(a: &KeygenArgs) -> Result<()> {
    let (pk, sk) = match a.seed {
        Some(seed) => keygen_seeded(a.key_bits, seed)?,
        None => keygen(a.key_bits, &mut rand::rngs::OsRng)?,
    };
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let (pp, sp) = (with_ext(&a.out, "pub"), with_ext(&a.out, "key"));
    pk.save(&pp).with_context(|| format!("writing {}", pp.display()))?;
    sk.save(&sp).with_context(|| format!("writing {}", sp.display()))?;
    eprintln!("wrote {} and {}", pp.display(), sp.display());
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs, infer: bool) -> Result<()> {
    let sk = match &a.key {
        Some(p) => SecretKey::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => keygen_seeded(a.key_bits, a.seed)?.1,
    };
    if a.bandwidth.contains(&0) {
        bail!("bandwidth must be positive");
    }
    let cfg = BenchConfig {
        method: a.method,
        items: a.items.clone(),
        dims: a.dim.clone(),
        friends: a.friends,
        scale_bits: a.scale_bits,
        slot_mod_bits: a.slot_mod_bits,
        slot_bits: a.slot_bits,
        bandwidths_mbps: a.bandwidth.clone(),
        reps: a.reps,
        seed: a.seed,
    };
    let rows = if infer { bench_infer(&cfg, &sk)? } else { bench_train(&cfg, &sk)? };
    emit(a.out.as_deref(), &to_csv(&rows, &a.bandwidth))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut data = if a.synth {
        synth_lowrank(&SynthConfig { seed: a.seed, ..Default::default() })?.0
    } else {
        let r = a.ratings.as_deref().expect("clap enforces ratings or synth");
        load_dataset(r, a.edges.as_deref())?
    };
    data.assign_sellers(a.sellers)?;
    let sp = split(&data, a.train_ratio, a.seed)?;
    let cfg = TrainConfig {
        method: a.method,
        dim: a.dim,
        epochs: a.epochs,
        lr: a.lr,
        lambda_u: a.lambda_u,
        lambda_v: a.lambda_v,
        lambda_s: a.lambda_s,
        max_items: a.items,
        max_friends: a.friends,
        threshold: a.threshold,
        key_bits: a.key_bits,
        seed: a.seed,
        ..Default::default()
    };
    let sink: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["epoch", "method", "train_rmse", "valid_rmse", "seconds", "bytes", "steps"])?;
    let mut write_err = None;
    let (model, _) = train(&data, &sp, &cfg, |e| {
        let rec = [
            e.epoch.to_string(),
            a.method.to_string(),
            format!("{:.6}", e.train_rmse),
            format!("{:.6}", e.valid_rmse),
            format!("{:.3}", e.seconds),
            e.bytes.to_string(),
            e.steps.to_string(),
        ];
        if let Err(err) = w.write_record(&rec).and_then(|_| w.flush().map_err(Into::into)) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(p) = &a.out {
        model.save(p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_users: a.users,
        n_items: a.items,
        k_true: a.rank,
        noise_sd: a.noise,
        social_density: a.social_density,
        ratings_per_user: a.ratings_per_user,
        seed: a.seed,
        ..Default::default()
    };
    let (d, _) = synth_lowrank(&cfg)?;
    fs::create_dir_all(&a.out)?;
    write_ratings(&d, &a.out.join("ratings.tsv"))?;
    write_edges(&d, &a.out.join("edges.tsv"))?;
    eprintln!("{} users, {} items, {} ratings, {} edges", d.n_users, d.n_items, d.ratings.len(), d.edges.len());
    Ok(())
}
