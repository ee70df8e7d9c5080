use rand::Rng;

use super::ops::{drop_count_for, drop_smallest, drop_smallest_n, grow_by_score, grow_random};
use super::redistribute::{apportion, mean_abs_over_active};
use super::{LayerUpdate, PruneSchedule, Redistribution, UpdateEvent};
use crate::sparsity::{active_count_for, LayerMask, MaskSet};

/// Read-only per-layer tensors a mask update may consult.
#[derive(Debug, Clone, Copy)]
pub struct LayerSignals<'a> {
    pub weights: &'a [f64],
    /// Dense gradient, defined at every position including masked ones.
    pub grads: &'a [f64],
    pub momentum: &'a [f64],
}

fn layer_update(l: usize, mask: &LayerMask, dropped: Vec<usize>, grown: Vec<usize>, pre: f64) -> LayerUpdate {
    LayerUpdate {
        layer: l,
        name: mask.name().to_string(),
        dropped,
        grown,
        density_pre: pre,
        density_post: mask.density(),
    }
}

/// RigL: drop the smallest magnitudes, regrow the same number by largest
/// dense-gradient magnitude.
pub fn rigl_update(step: usize, signals: &[LayerSignals<'_>], masks: &mut MaskSet, fraction: f64) -> UpdateEvent {
    let layers = signals
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let mask = masks.layer_mut(l);
            let pre = mask.density();
            let dropped = drop_smallest(s.weights, mask, fraction);
            let growth = grow_by_score(s.grads, mask, dropped.len());
            layer_update(l, mask, dropped, growth.grown, pre)
        })
        .collect();
    UpdateEvent { step, layers }
}

/// SET: drop the smallest magnitudes, regrow uniformly at random.
pub fn set_update<R: Rng + ?Sized>(
    step: usize,
    signals: &[LayerSignals<'_>],
    masks: &mut MaskSet,
    fraction: f64,
    rng: &mut R,
) -> UpdateEvent {
    let layers = signals
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let mask = masks.layer_mut(l);
            let pre = mask.density();
            let dropped = drop_smallest(s.weights, mask, fraction);
            let growth = grow_random(mask, dropped.len(), rng);
            layer_update(l, mask, dropped, growth.grown, pre)
        })
        .collect();
    UpdateEvent { step, layers }
}

/// Per-layer regrowth counts after a global drop, proportional to each
/// layer's mean criterion over its active weights (measured before the drop).
/// Falls back to regrowing what each layer lost when every mean is zero.
fn redistributed_counts(criteria: &[f64], drops: &[usize], capacity: &[usize]) -> Vec<usize> {
    let total: usize = drops.iter().sum();
    if criteria.iter().all(|&c| c <= 0.0 || !c.is_finite()) {
        return drops.to_vec();
    }
    apportion(total, criteria, capacity)
}

fn redistribute<'a>(
    step: usize,
    signals: &[LayerSignals<'a>],
    masks: &mut MaskSet,
    fraction: f64,
    criterion: impl Fn(&LayerSignals<'a>) -> &'a [f64],
    growth_score: impl Fn(&LayerSignals<'a>) -> &'a [f64],
) -> UpdateEvent {
    let n = signals.len();
    let criteria: Vec<f64> = (0..n)
        .map(|l| mean_abs_over_active(criterion(&signals[l]), masks.layer(l).bits()))
        .collect();
    let pre: Vec<f64> = masks.densities();
    let dropped: Vec<Vec<usize>> = (0..n)
        .map(|l| drop_smallest(signals[l].weights, masks.layer_mut(l), fraction))
        .collect();
    let drops: Vec<usize> = dropped.iter().map(Vec::len).collect();
    let capacity: Vec<usize> = (0..n)
        .map(|l| masks.layer(l).len() - masks.layer(l).active_count())
        .collect();
    let grow = redistributed_counts(&criteria, &drops, &capacity);
    let layers = dropped
        .into_iter()
        .enumerate()
        .map(|(l, d)| {
            let mask = masks.layer_mut(l);
            let growth = grow_by_score(growth_score(&signals[l]), mask, grow[l]);
            layer_update(l, mask, d, growth.grown, pre[l])
        })
        .collect();
    UpdateEvent { step, layers }
}

/// SNFS: magnitude drop, momentum-proportional redistribution, growth by
/// largest momentum magnitude. Needs dense momentum buffers.
pub fn snfs_update(step: usize, signals: &[LayerSignals<'_>], masks: &mut MaskSet, fraction: f64) -> UpdateEvent {
    redistribute(step, signals, masks, fraction, |s| s.momentum, |s| s.momentum)
}

/// RigL-SG / RigL-SM: redistribution by mean active gradient or momentum,
/// growth within a layer by dense gradient.
pub fn rigl_redistribute_update(
    step: usize,
    signals: &[LayerSignals<'_>],
    masks: &mut MaskSet,
    fraction: f64,
    redistribution: Redistribution,
) -> UpdateEvent {
    match redistribution {
        Redistribution::SparseMomentum => redistribute(step, signals, masks, fraction, |s| s.momentum, |s| s.grads),
        Redistribution::SparseGrad => redistribute(step, signals, masks, fraction, |s| s.grads, |s| s.grads),
        Redistribution::None => rigl_update(step, signals, masks, fraction),
    }
}

/// Gradual magnitude pruning toward per-layer final sparsities along the
/// cubic schedule. Never regrows.
pub fn gradual_prune_update(
    step: usize,
    signals: &[LayerSignals<'_>],
    masks: &mut MaskSet,
    schedule: &PruneSchedule,
    final_sparsities: &[f64],
) -> UpdateEvent {
    let progress = if schedule.s_final > 0.0 {
        schedule.sparsity_at(step) / schedule.s_final
    } else {
        0.0
    };
    let layers = signals
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let mask = masks.layer_mut(l);
            let pre = mask.density();
            let target_sparsity = final_sparsities.get(l).copied().unwrap_or(schedule.s_final) * progress;
            let target = active_count_for(mask.len(), target_sparsity);
            let excess = mask.active_count().saturating_sub(target);
            let dropped = drop_smallest_n(s.weights, mask, excess);
            layer_update(l, mask, dropped, Vec::new(), pre)
        })
        .collect();
    UpdateEvent { step, layers }
}

/// Per-output-channel L2 weight norm and summed |gradient| of a conv weight
/// laid out `[C_out, ...]`.
pub fn channel_stats(weights: &[f64], grads: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let per = weights.len() / channels;
    let norms = weights
        .chunks(per)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let grad_sums = grads.chunks(per).map(|c| c.iter().map(|g| g.abs()).sum()).collect();
    (norms, grad_sums)
}

/// Channel-level RigL on conv layers (4-d weights). Linear layers are left
/// untouched and should be dense.
pub fn rigl_struct_update(step: usize, signals: &[LayerSignals<'_>], masks: &mut MaskSet, fraction: f64) -> UpdateEvent {
    let layers = signals
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let mask = masks.layer_mut(l);
            let pre = mask.density();
            if mask.shape().len() != 4 {
                return layer_update(l, mask, Vec::new(), Vec::new(), pre);
            }
            let channels = mask.shape()[0];
            let per = mask.len() / channels;
            let (norms, grad_sums) = channel_stats(s.weights, s.grads, channels);
            let active: Vec<bool> = (0..channels).map(|c| mask.is_active(c * per)).collect();
            let mut channel_mask = LayerMask::from_active(
                "channels",
                &[channels],
                &(0..channels).filter(|&c| active[c]).collect::<Vec<_>>(),
            )
            .expect("indices in range");
            let count = drop_count_for(channel_mask.active_count(), fraction);
            let dropped_ch = drop_smallest_n(&norms, &mut channel_mask, count);
            let grown_ch = grow_by_score(&grad_sums, &mut channel_mask, dropped_ch.len()).grown;
            let expand = |chs: &[usize]| -> Vec<usize> { chs.iter().flat_map(|&c| c * per..(c + 1) * per).collect() };
            let dropped = expand(&dropped_ch);
            let grown = expand(&grown_ch);
            for &i in &dropped {
                mask.deactivate(i);
            }
            for &i in &grown {
                mask.activate(i);
            }
            layer_update(l, mask, dropped, grown, pre)
        })
        .collect();
    UpdateEvent { step, layers }
}
