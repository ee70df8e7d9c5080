use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::nn::{BufferMode, LrSchedule};
use crate::schedulers::{Method, PruneSchedule, UpdatePolicy};
use crate::sparsity::{Distribution, Granularity, SparsityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub name: DatasetName,
    /// Falls back to the `DST_DATA_DIR` environment variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Train/val/test sizes; defaults to 80% / 0 / 20% of the loaded data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<[usize; 3]>,
    #[serde(default)]
    pub split_seed: u64,
    /// Random flips and padded crops on training batches.
    #[serde(default)]
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub method: Method,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_delta_t")]
    pub delta_t: usize,
    /// Last update step at 1× training; defaults to 75% of total steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<usize>,
    /// Pruning ramp as fractions of total steps.
    #[serde(default = "default_prune_start")]
    pub prune_start: f64,
    #[serde(default = "default_prune_stop")]
    pub prune_stop: f64,
}

fn default_alpha() -> f64 {
    0.3
}
fn default_delta_t() -> usize {
    100
}
fn default_prune_start() -> f64 {
    0.0
}
fn default_prune_stop() -> f64 {
    0.75
}
fn default_momentum() -> f64 {
    0.9
}
fn default_lr_decay() -> f64 {
    0.2
}
fn default_multiplier() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Built-in architecture name or path to an architecture JSON file.
    pub arch: String,
    pub data: DataConfig,
    pub sparsity: SparsityConfig,
    pub scheduler: SchedulerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Epochs (at 1×) at which the learning rate decays; defaults to 50% and
    /// 75% of training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_milestones: Option<Vec<usize>>,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    pub seed: u64,
    #[serde(default)]
    pub buffer_mode: BufferMode,
    /// Scales epochs, T_end, the pruning ramp and LR milestones together.
    #[serde(default = "default_multiplier")]
    pub training_multiplier: usize,
}

impl Default for TrainConfig {
    /// MLP on the bundled 10k MNIST subset, ERK at 90% sparsity, RigL, 5 epochs.
    fn default() -> Self {
        Self {
            arch: "mlp".into(),
            data: DataConfig {
                name: DatasetName::Mnist,
                data_dir: None,
                split: Some([8000, 0, 2000]),
                split_seed: 0,
                augment: false,
            },
            sparsity: SparsityConfig::new(0.9, Distribution::Erk),
            scheduler: SchedulerConfig {
                method: Method::Rigl,
                alpha: default_alpha(),
                delta_t: default_delta_t(),
                t_end: None,
                prune_start: default_prune_start(),
                prune_stop: default_prune_stop(),
            },
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: default_momentum(),
            weight_decay: 1e-4,
            warmup_epochs: 0,
            lr_milestones: None,
            lr_decay: default_lr_decay(),
            label_smoothing: 0.0,
            seed: 0,
            buffer_mode: BufferMode::Sparse,
            training_multiplier: 1,
        }
    }
}

/// Command-line style overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub method: Option<Method>,
    pub sparsity: Option<f64>,
    pub distribution: Option<Distribution>,
    pub alpha: Option<f64>,
    pub delta_t: Option<usize>,
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub training_multiplier: Option<usize>,
    pub buffer_mode: Option<BufferMode>,
}

impl TrainConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.method {
            self.scheduler.method = m;
            if m == Method::RiglStruct {
                self.sparsity.granularity = Granularity::Channel;
            }
        }
        if let Some(s) = o.sparsity {
            self.sparsity.target_sparsity = s;
        }
        if let Some(d) = o.distribution {
            self.sparsity.distribution = d;
        }
        if let Some(a) = o.alpha {
            self.scheduler.alpha = a;
        }
        if let Some(d) = o.delta_t {
            self.scheduler.delta_t = d;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.data_dir {
            self.data.data_dir = Some(d.clone());
        }
        if let Some(e) = o.epochs {
            self.epochs = e;
        }
        if let Some(lr) = o.learning_rate {
            self.learning_rate = lr;
        }
        if let Some(b) = o.batch_size {
            self.batch_size = b;
        }
        if let Some(m) = o.training_multiplier {
            self.training_multiplier = m;
        }
        if let Some(b) = o.buffer_mode {
            self.buffer_mode = b;
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn run_dir_name(&self) -> String {
        format!("run-{}", self.hash())
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        let p = Path::new(&self.arch);
        if self.arch.ends_with(".json") || p.is_file() {
            ArchSpec::load(p)
        } else {
            ArchSpec::by_name(&self.arch)
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs * self.training_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        self.sparsity.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.training_multiplier == 0 {
            return Err(Error::input("epochs, batch size and training multiplier must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::input(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::input("label smoothing must be in [0, 1)"));
        }
        let method = self.scheduler.method;
        let channel = self.sparsity.granularity == Granularity::Channel;
        if channel != (method == Method::RiglStruct) {
            return Err(Error::input(
                "channel granularity goes with rigl_struct and only with rigl_struct",
            ));
        }
        if method == Method::Snfs && self.buffer_mode != BufferMode::Dense {
            return Err(Error::input("snfs needs dense momentum buffers (buffer_mode = dense)"));
        }
        let s = &self.scheduler;
        if !(0.0..=1.0).contains(&s.prune_start) || !(s.prune_start < s.prune_stop && s.prune_stop <= 1.0) {
            return Err(Error::input("pruning ramp needs 0 <= prune_start < prune_stop <= 1"));
        }
        Ok(())
    }

    /// Step-level schedule for a run with `steps_per_epoch` steps per epoch.
    pub fn schedule(&self, steps_per_epoch: usize) -> Result<RunSchedule> {
        let mult = self.training_multiplier;
        let total_steps = self.total_epochs() * steps_per_epoch;
        let s = &self.scheduler;
        let t_end = match s.t_end {
            Some(t) => t * mult,
            None => (total_steps as f64 * 0.75).floor() as usize,
        };
        let mut policy = UpdatePolicy::new(s.method, s.alpha, s.delta_t, t_end);
        if s.method == Method::Pruning {
            policy.prune_schedule = Some(PruneSchedule {
                s_final: self.sparsity.target_sparsity,
                t_start: (total_steps as f64 * s.prune_start).floor() as usize,
                t_stop: (total_steps as f64 * s.prune_stop).floor() as usize,
            });
        }
        policy.validate(total_steps)?;
        let milestones = match &self.lr_milestones {
            Some(m) => m.iter().map(|e| e * mult * steps_per_epoch).collect(),
            None => [0.5, 0.75]
                .iter()
                .map(|f| (total_steps as f64 * f).floor() as usize)
                .collect(),
        };
        let lr = LrSchedule {
            base: self.learning_rate,
            warmup_steps: self.warmup_epochs * mult * steps_per_epoch,
            milestones,
            decay: self.lr_decay,
        };
        Ok(RunSchedule {
            steps_per_epoch,
            total_steps,
            policy,
            lr,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSchedule {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub policy: UpdatePolicy,
    pub lr: LrSchedule,
}
