use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dst_core::flops::{forward_flops, FlopTrace};
use dst_core::harness::{self, Grid, Overrides, ReuseMode, TrainConfig};
use dst_core::sparsity::solve_distribution;
use dst_core::{ArchSpec, BufferMode, Distribution, MaskSet, Method, SparsityConfig};

#[derive(Parser)]
#[command(name = "dst", version, about = "Dynamic sparse training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Theoretical FLOP report for an architecture under a sparsity setting.
    Flops(FlopArgs),
    /// Run a grid of configurations over several seeds.
    Sweep(SweepArgs),
    /// Retrain from fresh weights using a saved mask.
    Rerun {
        #[command(flatten)]
        run: RunArgs,
        /// mask.json from an earlier run.
        #[arg(long)]
        mask: PathBuf,
        /// Reuse exact positions or only per-layer densities.
        #[arg(long, default_value = "positions")]
        mode: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; the built-in MNIST/MLP config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent directory for per-run output directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Default)]
struct OverrideArgs {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    distribution: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "delta-t")]
    delta_t: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "data-dir")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Scales epochs and T_end together (1, 2, 3, ...).
    #[arg(long)]
    multiplier: Option<usize>,
    /// sparse or dense momentum buffers.
    #[arg(long = "buffer-mode")]
    buffer_mode: Option<String>,
}

impl OverrideArgs {
    fn to_overrides(&self) -> Result<Overrides> {
        Ok(Overrides {
            method: self.method.as_deref().map(Method::parse).transpose()?,
            sparsity: self.sparsity,
            distribution: self.distribution.as_deref().map(Distribution::parse).transpose()?,
            alpha: self.alpha,
            delta_t: self.delta_t,
            seed: self.seed,
            data_dir: self.data_dir.clone(),
            epochs: self.epochs,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            training_multiplier: self.multiplier,
            buffer_mode: match self.buffer_mode.as_deref() {
                None => None,
                Some("sparse") => Some(BufferMode::Sparse),
                Some("dense") => Some(BufferMode::Dense),
                Some(other) => bail!("unknown buffer mode '{other}'"),
            },
        })
    }
}

#[derive(Args)]
struct FlopArgs {
    /// Built-in architecture name or architecture JSON file.
    #[arg(long)]
    arch: String,
    #[arg(long, default_value = "erk")]
    distribution: String,
    #[arg(long, default_value_t = 0.9)]
    sparsity: f64,
    #[arg(long, default_value = "rigl")]
    method: String,
    #[arg(long = "delta-t", default_value_t = 100)]
    delta_t: usize,
    /// Keep the first layer dense (default: only for uniform).
    #[arg(long = "first-layer-dense")]
    first_layer_dense: Option<bool>,
    /// JSON array of per-epoch sparse forward FLOPs, for methods whose
    /// sparsity changes during training.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print only the JSON report.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "sweeps")]
    out: PathBuf,
    #[arg(long = "data-dir")]
    data_dir: Option<PathBuf>,
    /// Comma-separated methods.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated learning rates.
    #[arg(long)]
    lrs: Option<String>,
    /// Comma-separated alpha:delta_t pairs, e.g. 0.3:100,0.4:200.
    #[arg(long)]
    schedules: Option<String>,
    #[arg(long)]
    sparsities: Option<String>,
    #[arg(long)]
    distributions: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn load_config(path: Option<&Path>, o: &OverrideArgs) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.apply(&o.to_overrides()?);
    if cfg.data.data_dir.is_none() && dst_core::data::resolve_data_dir(None).is_none() {
        let bundled = PathBuf::from("data/mnist-10k");
        if bundled.is_dir() {
            cfg.data.data_dir = Some(bundled);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn list<T>(text: Option<&str>, parse: impl Fn(&str) -> Result<T>, default: T) -> Result<Vec<T>> {
    match text {
        None => Ok(vec![default]),
        Some(t) => t.split(',').map(|s| parse(s.trim())).collect(),
    }
}

fn report_run(out: &harness::RunOutputs) {
    let m = out.final_metrics();
    println!(
        "test_accuracy {:.4}  sparsity {:.4}  train_flops {:.4e}  test_ratio {:.2}x",
        m.test_accuracy, m.sparsity, out.total_train_flops, out.flops.test_ratio
    );
    if let Some(d) = &out.dir {
        println!("outputs in {}", d.display());
    }
}

fn flops(a: &FlopArgs) -> Result<()> {
    let p = Path::new(&a.arch);
    let spec = if a.arch.ends_with(".json") || p.is_file() {
        ArchSpec::load(p)?
    } else {
        ArchSpec::by_name(&a.arch)?
    };
    let mut cfg = SparsityConfig::new(a.sparsity, Distribution::parse(&a.distribution)?);
    cfg.keep_first_layer_dense = a.first_layer_dense;
    let method = Method::parse(&a.method)?;
    let densities: Vec<f64> = solve_distribution(&spec, &cfg)?.iter().map(|s| 1.0 - s).collect();
    let trace = match &a.trace {
        Some(path) => {
            let values: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            Some(FlopTrace::from_snapshots(values))
        }
        None => None,
    };
    let report = forward_flops(&spec, Some(&densities))?.with_training(method, a.delta_t, trace.as_ref())?;
    if !a.json {
        print!("{}", report.to_text());
    }
    println!("{}", serde_json::to_string_pretty(&report.to_json_value())?);
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let o = OverrideArgs {
        data_dir: a.data_dir.clone(),
        ..Default::default()
    };
    let base = load_config(a.config.as_deref(), &o)?;
    let grid = Grid {
        methods: list(a.methods.as_deref(), |s| Ok(Method::parse(s)?), base.scheduler.method)?,
        learning_rates: list(a.lrs.as_deref(), |s| Ok(s.parse()?), base.learning_rate)?,
        schedules: list(
            a.schedules.as_deref(),
            |s| {
                let (x, y) = s.split_once(':').context("schedule must be alpha:delta_t")?;
                Ok((x.parse()?, y.parse()?))
            },
            (base.scheduler.alpha, base.scheduler.delta_t),
        )?,
        sparsities: list(a.sparsities.as_deref(), |s| Ok(s.parse()?), base.sparsity.target_sparsity)?,
        distributions: list(
            a.distributions.as_deref(),
            |s| Ok(Distribution::parse(s)?),
            base.sparsity.distribution,
        )?,
        seeds: list(a.seeds.as_deref(), |s| Ok(s.parse()?), base.seed)?,
    };
    let splits = harness::load_splits(&base.data)?;
    let result = harness::sweep(&base, &grid, &splits, a.workers, Some(&a.out))?;
    println!("method,lr,alpha,delta_t,sparsity,distribution,runs,failures,test_mean,test_std");
    for c in &result.cells {
        println!(
            "{},{},{},{},{},{},{},{},{},{}",
            c.method,
            c.learning_rate,
            c.alpha,
            c.delta_t,
            c.sparsity,
            c.distribution,
            c.runs,
            c.failures,
            c.test_accuracy_mean.map_or(String::new(), |v| format!("{v:.4}")),
            c.test_accuracy_std.map_or(String::new(), |v| format!("{v:.4}")),
        );
    }
    for r in result.runs.iter().filter(|r| r.error.is_some()) {
        eprintln!("cell {} seed {} failed: {}", r.cell, r.seed, r.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { run } => {
            let cfg = load_config(run.config.as_deref(), &run.overrides)?;
            let out = harness::run(&cfg, Some(&run.out))?;
            report_run(&out);
        }
        Command::Flops(a) => flops(&a)?,
        Command::Sweep(a) => sweep(&a)?,
        Command::Rerun { run, mask, mode } => {
            let cfg = load_config(run.config.as_deref(), &run.overrides)?;
            let checkpoint = MaskSet::load(&mask).with_context(|| format!("reading mask {}", mask.display()))?;
            let splits = harness::load_splits(&cfg.data)?;
            let out = harness::rerun_with_mask(&cfg, &splits, &checkpoint, ReuseMode::parse(&mode)?, Some(&run.out))?;
            report_run(&out);
        }
    }
    Ok(())
}
