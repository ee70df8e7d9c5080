//! Experiment driver: training loop, run outputs, mask re-use and sweeps.

mod config;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchSpec;
use crate::data::{
    batches, epoch_permutation, epoch_rng, load_cifar10_dir, load_mnist_dir, make_batch, resolve_data_dir, split,
    Augmentation, Dataset, Normalization, SplitSpec,
};
use crate::error::{Error, Result};
use crate::flops::{forward_flops, train_flops, FlopReport, FlopTrace, SparseFlops};
use crate::nn::{argmax_rows, cross_entropy_with_label_smoothing, Model, SgdState};
use crate::schedulers::{EventLog, Method, Scheduler};
use crate::sparsity::{init_channel_masks, init_masks, solve_distribution, Granularity, MaskSet};

pub use config::{DataConfig, DatasetName, Overrides, RunSchedule, SchedulerConfig, TrainConfig};
pub use sweep::{population_std, sweep, Grid, SweepCell, SweepResult, SweepRun};

/// Batch size used for evaluation passes.
const EVAL_BATCH: usize = 500;

/// Train/val/test subsets plus the normalization fitted on the train subset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub norm: Normalization,
}

impl Splits {
    pub fn new(train: Dataset, val: Dataset, test: Dataset) -> Self {
        let norm = Normalization::fit(&train);
        Self { train, val, test, norm }
    }
}

/// Loads the configured dataset and splits it.
pub fn load_splits(cfg: &DataConfig) -> Result<Splits> {
    let dir = resolve_data_dir(cfg.data_dir.as_deref()).ok_or_else(|| {
        Error::input(format!(
            "no data directory: pass one or set {}",
            crate::data::DATA_DIR_ENV
        ))
    })?;
    let full = match cfg.name {
        DatasetName::Mnist => load_mnist_dir(&dir)?,
        DatasetName::Cifar10 => load_cifar10_dir(&dir)?,
        DatasetName::Cifar100 => {
            let parts = ["train.bin", "test.bin"]
                .iter()
                .map(|n| dir.join(n))
                .filter(|p| p.is_file())
                .map(|p| crate::data::load_cifar_binary(p, crate::data::CifarVariant::Cifar100))
                .collect::<Result<Vec<_>>>()?;
            crate::data::concat(&parts)?
        }
    };
    let [train, val, test] = cfg.split.unwrap_or_else(|| {
        let test = full.len() / 5;
        [full.len() - test, 0, test]
    });
    let (tr, va, te) = split(
        &full,
        &SplitSpec {
            train,
            val,
            test,
            seed: cfg.split_seed,
        },
    )?;
    Ok(Splits::new(tr, va, te))
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: f64,
    /// Global sparsity recomputed from the masks at the end of the epoch.
    pub sparsity: f64,
    /// Sparse forward FLOPs of the current masks.
    pub f_s: f64,
    /// Train FLOPs spent so far.
    pub train_flops: f64,
}

/// How a saved mask seeds a new run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReuseMode {
    /// Exact mask positions.
    Positions,
    /// Only per-layer active counts; positions redrawn.
    Densities,
}

impl ReuseMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "positions" => Ok(ReuseMode::Positions),
            "densities" => Ok(ReuseMode::Densities),
            other => Err(Error::input(format!("unknown reuse mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub metrics: Vec<MetricsRecord>,
    pub initial_masks: MaskSet,
    pub masks: MaskSet,
    pub events: EventLog,
    pub flops: FlopReport,
    pub total_steps: usize,
    /// Train FLOPs over the whole run.
    pub total_train_flops: f64,
    pub dir: Option<PathBuf>,
}

impl RunOutputs {
    pub fn final_metrics(&self) -> &MetricsRecord {
        self.metrics.last().expect("at least one epoch")
    }
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Weights = 1,
    Masks = 2,
    Shuffle = 3,
    Scheduler = 4,
    Augment = 5,
}

fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

/// Loads data for `config` and trains.
pub fn run(config: &TrainConfig, out_root: Option<&Path>) -> Result<RunOutputs> {
    config.validate()?;
    let splits = load_splits(&config.data)?;
    run_with_data(config, &splits, out_root)
}

/// Trains on already loaded splits, starting from freshly drawn masks.
pub fn run_with_data(config: &TrainConfig, splits: &Splits, out_root: Option<&Path>) -> Result<RunOutputs> {
    let dir = out_root.map(|r| r.join(config.run_dir_name()));
    train(config, splits, None, dir)
}

/// Retrains from fresh weights using a saved mask: its exact positions, or
/// only its per-layer densities with positions redrawn.
pub fn rerun_with_mask(
    config: &TrainConfig,
    splits: &Splits,
    checkpoint: &MaskSet,
    mode: ReuseMode,
    out_root: Option<&Path>,
) -> Result<RunOutputs> {
    let spec = config.arch_spec()?;
    checkpoint.check_against(&spec)?;
    let masks = match mode {
        ReuseMode::Positions => checkpoint.clone(),
        ReuseMode::Densities => {
            let sparsities: Vec<f64> = checkpoint.densities().iter().map(|d| 1.0 - d).collect();
            let seed = derive_seed(config.seed, Stream::Masks);
            match config.sparsity.granularity {
                Granularity::Weight => init_masks(&spec, &sparsities, seed)?,
                Granularity::Channel => init_channel_masks(&spec, &sparsities, seed)?,
            }
        }
    };
    let dir = out_root.map(|r| {
        let mut h = Sha256::new();
        h.update(config.hash().as_bytes());
        h.update(format!("{mode:?}").as_bytes());
        h.update(checkpoint.to_json_string().unwrap_or_default().as_bytes());
        r.join(format!("rerun-{}", &hex::encode(h.finalize())[..16]))
    });
    train(config, splits, Some(masks), dir)
}

/// Fraction of `dataset` classified correctly.
pub fn evaluate(model: &mut Model, dataset: &Dataset, norm: &Normalization) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let order: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0usize;
    for idx in batches(&order, EVAL_BATCH) {
        let batch = make_batch(dataset, idx, norm, None)?;
        let logits = model.forward(&batch.inputs)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn initial_masks(config: &TrainConfig, spec: &ArchSpec, final_sparsities: &[f64]) -> Result<MaskSet> {
    let seed = derive_seed(config.seed, Stream::Masks);
    match (config.scheduler.method, config.sparsity.granularity) {
        (Method::Pruning, _) => MaskSet::dense(spec),
        (_, Granularity::Channel) => init_channel_masks(spec, final_sparsities, seed),
        (_, Granularity::Weight) => init_masks(spec, final_sparsities, seed),
    }
}

fn step_train_flops(method: Method, f_d: f64, f_s: f64, trace: &FlopTrace, delta_t: usize) -> Result<f64> {
    let sparse = if method.conserves_layer_counts() {
        SparseFlops::Constant(f_s)
    } else {
        SparseFlops::Trace(trace)
    };
    train_flops(method, f_d, sparse, delta_t)
}

fn train(config: &TrainConfig, splits: &Splits, masks_from: Option<MaskSet>, dir: Option<PathBuf>) -> Result<RunOutputs> {
    config.validate()?;
    let spec = config.arch_spec()?;
    if spec.input_len() != splits.train.image_len() {
        return Err(Error::input(format!(
            "architecture '{}' takes {} inputs but images have {}",
            spec.name,
            spec.input_len(),
            splits.train.image_len()
        )));
    }
    if spec.class_count < splits.train.class_count() {
        return Err(Error::input(format!(
            "architecture has {} outputs for {} classes",
            spec.class_count,
            splits.train.class_count()
        )));
    }
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(Error::input("train and test splits must be non-empty"));
    }
    let steps_per_epoch = splits.train.len().div_ceil(config.batch_size);
    let schedule = config.schedule(steps_per_epoch)?;
    let method = config.scheduler.method;
    let delta_t = config.scheduler.delta_t;

    let final_sparsities = solve_distribution(&spec, &config.sparsity)?;
    let mut masks = match masks_from {
        Some(m) => m,
        None => initial_masks(config, &spec, &final_sparsities)?,
    };
    masks.check_against(&spec)?;
    let initial = masks.clone();

    let mut model = Model::new(&spec, derive_seed(config.seed, Stream::Weights))?;
    model.apply_masks(&masks)?;
    let mut opt = SgdState::new(&model, config.momentum, config.learning_rate, config.buffer_mode)?
        .with_weight_decay(config.weight_decay);
    let mut scheduler = Scheduler::new(
        schedule.policy.clone(),
        derive_seed(config.seed, Stream::Scheduler),
        final_sparsities,
    );
    let f_d = forward_flops(&spec, None)?.f_d;
    let augmentation = config.data.augment.then(Augmentation::default);

    let mut metrics_writer = match &dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            fs::write(d.join("config.json"), config.to_json_string()?)?;
            initial.save(d.join("mask_init.json"))?;
            Some(csv::Writer::from_path(d.join("metrics.csv"))?)
        }
        None => None,
    };

    let mut events = EventLog::new();
    let mut trace = FlopTrace::new();
    let mut metrics = Vec::new();
    let mut t = 0usize;
    let shuffle_seed = derive_seed(config.seed, Stream::Shuffle);
    let augment_seed = derive_seed(config.seed, Stream::Augment);
    for epoch in 0..config.total_epochs() {
        let order = epoch_permutation(splits.train.len(), shuffle_seed, epoch);
        let mut aug_rng = epoch_rng(augment_seed, epoch, 1);
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for idx in batches(&order, config.batch_size) {
            opt.learning_rate = schedule.lr.at(t);
            t += 1;
            let batch = make_batch(
                &splits.train,
                idx,
                &splits.norm,
                augmentation.as_ref().map(|a| (a, &mut aug_rng)),
            )?;
            let logits = model.forward(&batch.inputs)?;
            let (loss, grad) = cross_entropy_with_label_smoothing(&logits, &batch.labels, config.label_smoothing)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: t,
                    loss,
                    layer_norms: model.weight_norms(),
                });
            }
            model.backward(&grad)?;
            if let Some(ev) = scheduler.update(t, &mut model, &mut opt, &mut masks)? {
                events.push(ev);
            }
            opt.step(&mut model, &masks)?;
            loss_sum += loss;
            loss_batches += 1;
        }
        let f_s = trace.record_epoch(&spec, &masks)?;
        let per_step = step_train_flops(method, f_d, f_s, &trace, delta_t)?;
        let record = MetricsRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / loss_batches as f64,
            val_accuracy: if splits.val.is_empty() {
                None
            } else {
                Some(evaluate(&mut model, &splits.val, &splits.norm)?)
            },
            test_accuracy: evaluate(&mut model, &splits.test, &splits.norm)?,
            sparsity: masks.global_sparsity(),
            f_s,
            train_flops: t as f64 * per_step,
        };
        if let Some(w) = metrics_writer.as_mut() {
            w.serialize(&record)?;
            w.flush()?;
        }
        log::info!(
            "epoch {} loss {:.4} test {:.4} sparsity {:.4}",
            record.epoch,
            record.train_loss,
            record.test_accuracy,
            record.sparsity
        );
        metrics.push(record);
    }

    let trace_for_report = (!method.conserves_layer_counts()).then_some(&trace);
    let flops = forward_flops(&spec, Some(&masks.densities()))?.with_training(method, delta_t, trace_for_report)?;
    let total_train_flops = metrics.last().map(|m| m.train_flops).unwrap_or(0.0);
    if let Some(d) = &dir {
        masks.save(d.join("mask.json"))?;
        events.save(d.join("events.csv"))?;
        let mut json = flops.to_json_value();
        json["method"] = serde_json::json!(method.name());
        json["delta_t"] = serde_json::json!(delta_t);
        json["total_steps"] = serde_json::json!(schedule.total_steps);
        json["total_train_flops"] = serde_json::json!(total_train_flops);
        fs::write(d.join("flops.json"), serde_json::to_string_pretty(&json)?)?;
    }
    Ok(RunOutputs {
        metrics,
        initial_masks: initial,
        masks,
        events,
        flops,
        total_steps: schedule.total_steps,
        total_train_flops,
        dir,
    })
}
