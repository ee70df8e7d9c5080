//! Mask-update algorithms.
//!
//! Every `ΔT` steps until `T_end` a scheduler prunes a cosine-annealed
//! fraction of each layer's smallest-magnitude weights and regrows
//! connections by a method-specific criterion. Grown weights start at zero.

mod events;
mod methods;
mod ops;
mod redistribute;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BufferMode, Model, SgdState};
use crate::sparsity::MaskSet;

pub use events::{read_events_csv, replay_events, write_events_csv, EventLog};
pub use methods::{
    channel_stats, gradual_prune_update, rigl_redistribute_update, rigl_struct_update, rigl_update,
    set_update, snfs_update, LayerSignals,
};
pub use ops::{
    drop_count_for, drop_smallest, drop_smallest_n, grow_by_gradient, grow_by_score, grow_random,
    Growth,
};
pub use redistribute::{apportion, mean_abs_over_active};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Static,
    Set,
    Rigl,
    Snfs,
    RiglSg,
    RiglSm,
    Pruning,
    RiglStruct,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Static,
        Method::Set,
        Method::Rigl,
        Method::Snfs,
        Method::RiglSg,
        Method::RiglSm,
        Method::Pruning,
        Method::RiglStruct,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::input(format!("unknown method '{s}'")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Static => "static",
            Method::Set => "set",
            Method::Rigl => "rigl",
            Method::Snfs => "snfs",
            Method::RiglSg => "rigl_sg",
            Method::RiglSm => "rigl_sm",
            Method::Pruning => "pruning",
            Method::RiglStruct => "rigl_struct",
        }
    }

    pub fn redistribution(self) -> Redistribution {
        match self {
            Method::RiglSg => Redistribution::SparseGrad,
            Method::Snfs | Method::RiglSm => Redistribution::SparseMomentum,
            _ => Redistribution::None,
        }
    }

    /// Whether the per-layer active count is fixed for the whole run.
    pub fn conserves_layer_counts(self) -> bool {
        matches!(self, Method::Static | Method::Set | Method::Rigl | Method::RiglStruct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Redistribution {
    None,
    SparseGrad,
    SparseMomentum,
}

/// Cubic sparsity ramp for gradual magnitude pruning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub s_final: f64,
    pub t_start: usize,
    pub t_stop: usize,
}

impl PruneSchedule {
    /// `s(t) = s_final·(1 − (1 − (t − t_start)/(t_stop − t_start))³)`,
    /// clamped to the ramp.
    pub fn sparsity_at(&self, t: usize) -> f64 {
        if t <= self.t_start {
            return 0.0;
        }
        if t >= self.t_stop {
            return self.s_final;
        }
        let p = (t - self.t_start) as f64 / (self.t_stop - self.t_start) as f64;
        self.s_final * (1.0 - (1.0 - p).powi(3))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdatePolicy {
    pub method: Method,
    pub alpha: f64,
    pub delta_t: usize,
    pub t_end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune_schedule: Option<PruneSchedule>,
}

impl UpdatePolicy {
    pub fn new(method: Method, alpha: f64, delta_t: usize, t_end: usize) -> Self {
        Self {
            method,
            alpha,
            delta_t,
            t_end,
            prune_schedule: None,
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.delta_t == 0 {
            return Err(Error::input("delta_t must be at least 1"));
        }
        if self.method != Method::Static && !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::input(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.t_end > total_steps {
            return Err(Error::input(format!(
                "t_end {} exceeds the {total_steps} training steps",
                self.t_end
            )));
        }
        if self.method == Method::Pruning {
            let s = self
                .prune_schedule
                .ok_or_else(|| Error::input("pruning needs a prune schedule"))?;
            if s.t_stop <= s.t_start || s.t_stop > total_steps {
                return Err(Error::input(format!(
                    "prune schedule [{}, {}] must be a non-empty range within {total_steps} steps",
                    s.t_start, s.t_stop
                )));
            }
            if !(0.0..1.0).contains(&s.s_final) {
                return Err(Error::input("final pruning sparsity must be in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Cosine-annealed drop fraction `f(t) = α/2·(1 + cos(tπ/T_end))`; zero once
/// `t > T_end`.
pub fn prune_fraction(t: usize, alpha: f64, t_end: usize) -> f64 {
    if t > t_end || t_end == 0 {
        return 0.0;
    }
    alpha / 2.0 * (1.0 + (t as f64 * std::f64::consts::PI / t_end as f64).cos())
}

/// True at positive multiples of `ΔT` up to and including `T_end`.
pub fn should_update(t: usize, delta_t: usize, t_end: usize) -> bool {
    delta_t > 0 && t > 0 && t.is_multiple_of(delta_t) && t <= t_end
}

/// Mask changes of one layer during one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUpdate {
    pub layer: usize,
    pub name: String,
    /// Deactivated flat indices, ascending.
    pub dropped: Vec<usize>,
    /// Activated flat indices, ascending. May overlap `dropped`.
    pub grown: Vec<usize>,
    pub density_pre: f64,
    pub density_post: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub step: usize,
    pub layers: Vec<LayerUpdate>,
}

impl UpdateEvent {
    pub fn dropped_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.dropped.len()).collect()
    }

    pub fn grown_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.grown.len()).collect()
    }

    /// Applies drops then growths to `masks`.
    pub fn apply_to(&self, masks: &mut MaskSet) -> Result<()> {
        for lu in &self.layers {
            if lu.layer >= masks.len() {
                return Err(Error::input(format!("event refers to missing layer {}", lu.layer)));
            }
            let mask = masks.layer_mut(lu.layer);
            for &i in lu.dropped.iter().chain(&lu.grown) {
                if i >= mask.len() {
                    return Err(Error::input(format!(
                        "event index {i} out of range for layer '{}'",
                        lu.name
                    )));
                }
            }
            for &i in &lu.dropped {
                mask.deactivate(i);
            }
            for &i in &lu.grown {
                mask.activate(i);
            }
        }
        Ok(())
    }
}

/// Drives one method's mask updates over a training run.
#[derive(Debug, Clone)]
pub struct Scheduler {
    policy: UpdatePolicy,
    rng: ChaCha8Rng,
    /// Per-layer final sparsities targeted by gradual pruning.
    final_sparsities: Vec<f64>,
}

impl Scheduler {
    pub fn new(policy: UpdatePolicy, seed: u64, final_sparsities: Vec<f64>) -> Self {
        Self {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            final_sparsities,
        }
    }

    pub fn policy(&self) -> &UpdatePolicy {
        &self.policy
    }

    pub fn is_update_step(&self, t: usize) -> bool {
        let p = &self.policy;
        match p.method {
            Method::Static => false,
            Method::Pruning => {
                let s = p.prune_schedule.expect("validated");
                t > 0 && t.is_multiple_of(p.delta_t) && t >= s.t_start && t <= s.t_stop
            }
            _ => should_update(t, p.delta_t, p.t_end),
        }
    }

    /// Runs the update for step `t` if one is due, using the dense gradients
    /// currently stored on the model and the optimizer's momentum.
    ///
    /// Newly grown weights are set to zero; under sparse buffers their
    /// momentum (and that of dropped weights) is zeroed as well.
    pub fn update(
        &mut self,
        t: usize,
        model: &mut Model,
        optimizer: &mut SgdState,
        masks: &mut MaskSet,
    ) -> Result<Option<UpdateEvent>> {
        if !self.is_update_step(t) {
            return Ok(None);
        }
        let p = self.policy.clone();
        let f = prune_fraction(t, p.alpha, p.t_end);
        let event = {
            let signals: Vec<LayerSignals<'_>> = (0..model.maskable_count())
                .map(|l| {
                    let w = model.weight(l);
                    Ok(LayerSignals {
                        weights: w.values(),
                        grads: w.grad().ok_or_else(|| {
                            Error::State(format!("mask update at step {t} without gradients"))
                        })?,
                        momentum: optimizer.weight_momentum(l),
                    })
                })
                .collect::<Result<_>>()?;
            match p.method {
                Method::Static => unreachable!("static never updates"),
                Method::Rigl => rigl_update(t, &signals, masks, f),
                Method::Set => set_update(t, &signals, masks, f, &mut self.rng),
                Method::Snfs => snfs_update(t, &signals, masks, f),
                Method::RiglSg | Method::RiglSm => {
                    rigl_redistribute_update(t, &signals, masks, f, p.method.redistribution())
                }
                Method::Pruning => gradual_prune_update(
                    t,
                    &signals,
                    masks,
                    &p.prune_schedule.expect("validated"),
                    &self.final_sparsities,
                ),
                Method::RiglStruct => rigl_struct_update(t, &signals, masks, f),
            }
        };
        let sparse = optimizer.buffer_mode == BufferMode::Sparse;
        for lu in &event.layers {
            let w = model.weight_mut(lu.layer).values_mut();
            for &i in &lu.dropped {
                w[i] = 0.0;
            }
            for &i in &lu.grown {
                w[i] = 0.0;
            }
            if sparse {
                let m = optimizer.weight_momentum_mut(lu.layer);
                for &i in lu.dropped.iter().chain(&lu.grown) {
                    m[i] = 0.0;
                }
            }
        }
        Ok(Some(event))
    }
}
