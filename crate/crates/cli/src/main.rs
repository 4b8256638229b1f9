use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use defectnet::bench::{self, BenchRow, LatencyConfig};
use defectnet::data::{self, Split, IMAGE_SIDE};
use defectnet::explore::{self, Candidate, SearchConfig};
use defectnet::graph::{self, Checkpoint, Design};
use defectnet::train::{self, TrainConfig};
use defectnet_inspect::{AppState, Classifier, STORE_ENV};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "defectnet", version, about = "Defect classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Table,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic plate dataset as PNGs plus a split manifest.
    Gendata {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = data::DEFAULT_DEFECTIVE)]
        defective: usize,
        #[arg(long, default_value_t = data::DEFAULT_CLEAN)]
        clean: usize,
    },
    /// Train a design on a PNG directory; prints the history as CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure inference latency and print the comparison table.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, value_enum, default_value = "table")]
        emit: Emit,
        /// Baseline rows (CSV with the table schema); the bundled rows otherwise.
        #[arg(long)]
        baselines: Option<PathBuf>,
        /// Test accuracy to report; taken from the checkpoint when omitted.
        #[arg(long)]
        accuracy: Option<f64>,
    },
    /// Constrained architecture search from the built-in seed designs.
    Explore {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        generations: usize,
        #[arg(long, default_value_t = 8)]
        population: usize,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with further search settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the inspection HTTP service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = STORE_ENV, default_value = "inspect-store")]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

/// `train --config` file.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    /// "reference" or a path to a design (or search candidate) JSON file.
    design: String,
    /// Training resolution; must divide the image side. The checkpoint keeps
    /// this resolution, and only full-resolution checkpoints can be served.
    resolution: usize,
    /// Seed for the split when the data directory has no manifest.
    split_seed: u64,
    train: TrainConfig,
}

impl Default for TrainFile {
    fn default() -> Self {
        TrainFile {
            design: "reference".into(),
            resolution: IMAGE_SIDE,
            split_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

fn load_design(spec: &str, base: &Path) -> Result<Design> {
    if spec == "reference" {
        return Ok(graph::reference_design());
    }
    let path = base.join(spec);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(d) = serde_json::from_str::<Design>(&text) {
        return Ok(d);
    }
    let c: Candidate = serde_json::from_str(&text)
        .with_context(|| format!("{} is neither a design nor a candidate", path.display()))?;
    Ok(c.design)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gendata(seed: u64, out: &Path, defective: usize, clean: usize) -> Result<()> {
    let set = data::split(&data::generate(seed, defective, clean), seed)?;
    data::write_directory(&set, out)?;
    log::info!(
        "wrote {} plates ({} train, {} test) to {}",
        set.len(),
        set.indices(Split::Train).len(),
        set.indices(Split::Test).len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(config: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let cfg: TrainFile = read_toml(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let design = load_design(&cfg.design, base)?;
    if cfg.resolution == 0 || IMAGE_SIDE % cfg.resolution != 0 {
        bail!("resolution {} does not divide {IMAGE_SIDE}", cfg.resolution);
    }
    let mut set = data::load_directory(data_dir)?;
    if set.indices(Split::Train).is_empty() {
        log::info!("no split manifest; splitting with seed {}", cfg.split_seed);
        set = data::split(&set, cfg.split_seed)?;
    }
    if cfg.resolution != IMAGE_SIDE {
        set = set.downscaled(IMAGE_SIDE / cfg.resolution)?;
    }
    let g = design.at_resolution(cfg.resolution).compile()?;
    log::info!(
        "{}: {} params, {} FLOPs at {}px",
        g.name,
        g.count_params(),
        g.flops()?,
        cfg.resolution
    );
    let (params, history) = train::train(&g, &set, &cfg.train)?;
    train::write_history(std::io::stdout().lock(), &history)?;

    let test_acc = history.iter().rev().find_map(|h| h.test_acc);
    let ckpt = Checkpoint {
        graph: g,
        params,
        metadata: serde_json::json!({
            "design": design,
            "train": cfg.train,
            "train_resolution": cfg.resolution,
            "test_acc": test_acc,
        }),
    };
    graph::save_checkpoint(out, &ckpt)?;
    log::info!("checkpoint written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench_cmd(
    checkpoint: &Path,
    batch: usize,
    iters: usize,
    warmup: usize,
    emit: Emit,
    baselines: Option<&Path>,
    accuracy: Option<f64>,
) -> Result<()> {
    let ckpt = graph::load_checkpoint(checkpoint)?;
    let accuracy = match accuracy.or_else(|| ckpt.metadata["test_acc"].as_f64()) {
        Some(a) => a,
        None => bail!("checkpoint has no recorded test accuracy; pass --accuracy"),
    };
    let cfg = LatencyConfig {
        batch_size: batch,
        warmup_iters: warmup,
        timed_iters: iters,
    };
    let stats = bench::benchmark_latency(&ckpt.graph, &ckpt.params, &cfg)?;
    let mut rows = match baselines {
        Some(p) => bench::parse_rows(&fs::read_to_string(p)?)?,
        None => bench::published_rows(),
    };
    rows.push(BenchRow {
        model_name: ckpt.graph.name.clone(),
        accuracy_pct: accuracy,
        params_m: ckpt.graph.count_params() as f64 / 1e6,
        flops_m: ckpt.graph.flops()? as f64 / 1e6,
        latency_ms: stats.per_sample_ms,
    });
    let report = bench::emit_table(&rows)?;
    let mut out = std::io::stdout().lock();
    match emit {
        Emit::Table => {
            writeln!(out, "{}", report.text)?;
            writeln!(
                out,
                "note: latency measured on this host (1 thread, batch {batch}, median of {iters}); \
                 not comparable with the baseline rows' hardware"
            )?;
        }
        Emit::Csv => write!(out, "{}", report.csv)?,
    }
    Ok(())
}

fn explore_cmd(
    seed: u64,
    generations: usize,
    population: usize,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let mut cfg: SearchConfig = match config {
        Some(p) => read_toml(p)?,
        None => SearchConfig::default(),
    };
    cfg.seed = seed;
    cfg.generations = generations;
    cfg.population = population;
    let state = explore::search(&explore::seed_designs(), &cfg)?;
    state.write_run(out)?;
    let best = &state.best_so_far;
    println!(
        "best {} score {:.3} acc {:.2}% params {} flops {}",
        best.fingerprint, best.score, best.accuracy_pct, best.params, best.flops
    );
    Ok(())
}

fn serve_cmd(checkpoint: Option<&Path>, store: &Path, addr: SocketAddr) -> Result<()> {
    let model = match checkpoint {
        Some(p) => Some(Classifier::load(p)?),
        None => {
            log::warn!("no checkpoint given; /inspect will answer 503");
            None
        }
    };
    let state = AppState::open(store, model)?;
    log::info!("record store at {}", store.display());
    tokio::runtime::Runtime::new()?.block_on(defectnet_inspect::serve(addr, state))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Gendata {
            seed,
            out,
            defective,
            clean,
        } => gendata(seed, &out, defective, clean),
        Command::Train { config, data, out } => train_cmd(&config, &data, &out),
        Command::Bench {
            checkpoint,
            batch,
            iters,
            warmup,
            emit,
            baselines,
            accuracy,
        } => bench_cmd(
            &checkpoint,
            batch,
            iters,
            warmup,
            emit,
            baselines.as_deref(),
            accuracy,
        ),
        Command::Explore {
            seed,
            generations,
            population,
            out,
            config,
        } => explore_cmd(seed, generations, population, &out, config.as_deref()),
        Command::Serve {
            checkpoint,
            store,
            port,
            host,
        } => serve_cmd(checkpoint.as_deref(), &store, SocketAddr::new(host, port)),
    }
}
