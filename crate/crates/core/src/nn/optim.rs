use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::sparsity::MaskSet;

/// Whether momentum at masked-out weight positions is kept or forced to zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferMode {
    #[default]
    Sparse,
    Dense,
}

/// SGD with heavy-ball momentum: `b ← μ·b + g`, `w ← w − η·b`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub momentum_coeff: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub buffer_mode: BufferMode,
    weight_buffers: Vec<Vec<f64>>,
    bias_buffers: Vec<Option<Vec<f64>>>,
}

impl SgdState {
    pub fn new(model: &Model, momentum_coeff: f64, learning_rate: f64, buffer_mode: BufferMode) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum_coeff) {
            return Err(Error::input(format!("momentum must be in [0, 1), got {momentum_coeff}")));
        }
        if learning_rate <= 0.0 || !learning_rate.is_finite() {
            return Err(Error::input(format!("learning rate must be positive, got {learning_rate}")));
        }
        let weight_buffers = (0..model.maskable_count()).map(|l| vec![0.0; model.weight(l).len()]).collect();
        let bias_buffers = (0..model.maskable_count())
            .map(|l| model.bias(l).map(|b| vec![0.0; b.len()]))
            .collect();
        Ok(Self {
            momentum_coeff,
            learning_rate,
            weight_decay: 0.0,
            buffer_mode,
            weight_buffers,
            bias_buffers,
        })
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Momentum buffer of maskable layer `l`'s weight.
    pub fn weight_momentum(&self, l: usize) -> &[f64] {
        &self.weight_buffers[l]
    }

    pub fn weight_momentum_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.weight_buffers[l]
    }

    /// One update using the gradients stored on the model's parameters,
    /// followed by mask re-application (and momentum masking in sparse mode).
    pub fn step(&mut self, model: &mut Model, masks: &MaskSet) -> Result<()> {
        if masks.len() != model.maskable_count() {
            return Err(Error::input(format!(
                "{} masks for {} maskable layers",
                masks.len(),
                model.maskable_count()
            )));
        }
        let (mu, lr, wd) = (self.momentum_coeff, self.learning_rate, self.weight_decay);
        for l in 0..model.maskable_count() {
            let mask = masks.layer(l);
            let w = model.weight_mut(l);
            if mask.len() != w.len() {
                return Err(Error::Shape {
                    expected: mask.shape().to_vec(),
                    actual: w.shape().to_vec(),
                });
            }
            let grad = w
                .grad()
                .ok_or_else(|| Error::State(format!("no gradient for layer {l}")))?
                .to_vec();
            let buf = &mut self.weight_buffers[l];
            for ((v, b), g) in w.values_mut().iter_mut().zip(buf.iter_mut()).zip(&grad) {
                *b = mu * *b + g + wd * *v;
                *v -= lr * *b;
            }
            mask.apply(w.values_mut())?;
            if self.buffer_mode == BufferMode::Sparse {
                mask.apply(buf)?;
            }

            if let (Some(bias), Some(buf)) = (model.bias_mut(l), self.bias_buffers[l].as_mut()) {
                let grad = bias
                    .grad()
                    .ok_or_else(|| Error::State(format!("no bias gradient for layer {l}")))?
                    .to_vec();
                for ((v, b), g) in bias.values_mut().iter_mut().zip(buf.iter_mut()).zip(&grad) {
                    *b = mu * *b + g;
                    *v -= lr * *b;
                }
            }
        }
        Ok(())
    }

    /// Zeroes momentum at masked-out positions (used after mask updates in
    /// sparse mode).
    pub fn mask_buffers(&mut self, masks: &MaskSet) -> Result<()> {
        for (l, buf) in self.weight_buffers.iter_mut().enumerate() {
            masks.layer(l).apply(buf)?;
        }
        Ok(())
    }
}

/// Linear warmup followed by step decay at fixed step milestones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            warmup_steps: 0,
            milestones: Vec::new(),
            decay: 1.0,
        }
    }

    /// Learning rate for step `t` (0-based). During warmup the rate ramps
    /// linearly and equals `base` at the last warmup step.
    pub fn at(&self, t: usize) -> f64 {
        if t < self.warmup_steps {
            return self.base * (t + 1) as f64 / self.warmup_steps as f64;
        }
        let passed = self.milestones.iter().filter(|&&m| t >= m).count();
        self.base * self.decay.powi(passed as i32)
    }
}
