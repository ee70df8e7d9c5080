//! Layer-wise sparsity distributions and boolean weight masks.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, MaskableLayer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Uniform,
    Er,
    Erk,
}

impl Distribution {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "random" => Ok(Distribution::Uniform),
            "er" | "erdos-renyi" => Ok(Distribution::Er),
            "erk" | "erdos-renyi-kernel" => Ok(Distribution::Erk),
            other => Err(Error::input(format!("unknown distribution '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Distribution::Uniform => "uniform",
            Distribution::Er => "er",
            Distribution::Erk => "erk",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Weight,
    /// Whole conv output channels; linear layers stay dense.
    Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub target_sparsity: f64,
    pub distribution: Distribution,
    /// Defaults to true for uniform and false for ER/ERK.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_first_layer_dense: Option<bool>,
    #[serde(default)]
    pub granularity: Granularity,
}

impl SparsityConfig {
    pub fn new(target_sparsity: f64, distribution: Distribution) -> Self {
        Self {
            target_sparsity,
            distribution,
            keep_first_layer_dense: None,
            granularity: Granularity::Weight,
        }
    }

    pub fn with_first_layer_dense(mut self, keep: bool) -> Self {
        self.keep_first_layer_dense = Some(keep);
        self
    }

    pub fn first_layer_dense(&self) -> bool {
        self.keep_first_layer_dense
            .unwrap_or(self.distribution == Distribution::Uniform)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::input(format!(
                "target sparsity must be in [0, 1), got {}",
                self.target_sparsity
            )));
        }
        Ok(())
    }
}

/// Density scale of a layer before the global ε is applied.
pub fn raw_density_factor(layer: &MaskableLayer, distribution: Distribution) -> f64 {
    let cin = layer.in_channels as f64;
    let cout = layer.out_channels as f64;
    match distribution {
        Distribution::Uniform => 1.0,
        Distribution::Er => (cin + cout) / (cin * cout),
        Distribution::Erk if layer.is_conv => {
            let (h, w) = (layer.kernel_h as f64, layer.kernel_w as f64);
            (cin + cout + w + h) / (cin * cout * w * h)
        }
        Distribution::Erk => (cin + cout) / (cin * cout),
    }
}

/// Per-layer sparsities `s_l` (one per maskable layer, in node order) whose
/// parameter-weighted mean is the configured target.
pub fn solve_distribution(spec: &ArchSpec, cfg: &SparsityConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let layers = spec.maskable_layers()?;
    let counts: Vec<f64> = layers.iter().map(|l| l.parameter_count() as f64).collect();
    let total: f64 = counts.iter().sum();
    let target_active = (1.0 - cfg.target_sparsity) * total;

    let exempt: Vec<bool> = layers
        .iter()
        .map(|l| {
            (l.first_layer && cfg.first_layer_dense())
                || (cfg.granularity == Granularity::Channel && !l.is_conv)
        })
        .collect();
    if cfg.granularity == Granularity::Channel && !layers.iter().any(|l| l.is_conv) {
        return Err(Error::input("channel granularity needs at least one conv layer"));
    }
    let exempt_count: f64 = counts.iter().zip(&exempt).filter(|(_, e)| **e).map(|(n, _)| n).sum();
    if exempt_count > target_active * (1.0 + 1e-12) {
        return Err(Error::input(format!(
            "sparsity {} is unachievable with dense layers holding {} of {} weights; \
             the highest achievable sparsity is {:.6}",
            cfg.target_sparsity,
            exempt_count,
            total,
            1.0 - exempt_count / total
        )));
    }
    let factors: Vec<f64> = layers
        .iter()
        .map(|l| raw_density_factor(l, cfg.distribution))
        .collect();
    let densities = solve_capped_densities(&counts, &factors, &exempt, target_active);
    Ok(densities.into_iter().map(|d| 1.0 - d).collect())
}

/// Finds `d_l = min(1, ε·factor_l)` with `Σ d_l N_l = target` for the layers
/// not in `fixed_dense`. Layers whose density would exceed one are pinned
/// dense and ε is re-solved for the rest until nothing overflows.
pub fn solve_capped_densities(
    counts: &[f64],
    factors: &[f64],
    fixed_dense: &[bool],
    target_active: f64,
) -> Vec<f64> {
    let mut dense = fixed_dense.to_vec();
    loop {
        let dense_total: f64 = counts.iter().zip(&dense).filter(|(_, d)| **d).map(|(n, _)| n).sum();
        let scaled_total: f64 = counts
            .iter()
            .zip(factors)
            .zip(&dense)
            .filter(|(_, d)| !**d)
            .map(|((n, f), _)| n * f)
            .sum();
        if scaled_total == 0.0 {
            return dense.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
        }
        let eps = ((target_active - dense_total) / scaled_total).max(0.0);
        let mut overflow = false;
        for (i, f) in factors.iter().enumerate() {
            if !dense[i] && eps * f > 1.0 {
                dense[i] = true;
                overflow = true;
            }
        }
        if !overflow {
            return factors
                .iter()
                .zip(&dense)
                .map(|(f, &d)| if d { 1.0 } else { eps * f })
                .collect();
        }
    }
}

/// Active-weight count for a layer of `n` weights at sparsity `s`:
/// round-half-up of `(1 − s)·n`, never below one.
pub fn active_count_for(n: usize, sparsity: f64) -> usize {
    let k = ((1.0 - sparsity) * n as f64 + 0.5).floor() as usize;
    k.clamp(1.min(n), n)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    name: String,
    shape: Vec<usize>,
    mask: Vec<bool>,
    active: usize,
}

impl LayerMask {
    pub fn dense(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            mask: vec![true; n],
            active: n,
        }
    }

    pub fn from_active(name: impl Into<String>, shape: &[usize], active: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        let mut mask = vec![false; n];
        for &i in active {
            if i >= n {
                return Err(Error::input(format!("active index {i} out of range {n}")));
            }
            if mask[i] {
                return Err(Error::input(format!("active index {i} listed twice")));
            }
            mask[i] = true;
        }
        Ok(Self {
            name: name.into(),
            shape: shape.to_vec(),
            mask,
            active: active.len(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.mask[i]
    }

    /// k_l.
    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn density(&self) -> f64 {
        self.active as f64 / self.mask.len() as f64
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.density()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn inactive_indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i).collect()
    }

    pub fn activate(&mut self, i: usize) {
        if !self.mask[i] {
            self.mask[i] = true;
            self.active += 1;
        }
    }

    pub fn deactivate(&mut self, i: usize) {
        if self.mask[i] {
            self.mask[i] = false;
            self.active -= 1;
        }
    }

    /// Zeroes every masked-out entry of `values`.
    pub fn apply(&self, values: &mut [f64]) -> Result<()> {
        if values.len() != self.mask.len() {
            return Err(Error::Shape {
                expected: self.shape.clone(),
                actual: vec![values.len()],
            });
        }
        for (v, &m) in values.iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
        Ok(())
    }

    fn recount(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    layers: Vec<LayerMask>,
}

#[derive(Serialize, Deserialize)]
struct LayerCheckpoint {
    name: String,
    shape: Vec<usize>,
    active: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MaskCheckpoint {
    layers: Vec<LayerCheckpoint>,
}

impl MaskSet {
    pub fn new(layers: Vec<LayerMask>) -> Self {
        Self { layers }
    }

    /// All-true masks for every maskable layer of `spec`.
    pub fn dense(spec: &ArchSpec) -> Result<Self> {
        Ok(Self::new(
            spec.maskable_layers()?
                .iter()
                .map(|l| LayerMask::dense(l.name.clone(), &l.weight_shape))
                .collect(),
        ))
    }

    pub fn layers(&self) -> &[LayerMask] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerMask {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerMask {
        &mut self.layers[l]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn densities(&self) -> Vec<f64> {
        self.layers.iter().map(LayerMask::density).collect()
    }

    pub fn active_counts(&self) -> Vec<usize> {
        self.layers.iter().map(LayerMask::active_count).collect()
    }

    pub fn total_active(&self) -> usize {
        self.layers.iter().map(LayerMask::active_count).sum()
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(LayerMask::len).sum()
    }

    /// Realized global sparsity Σ(N_l − k_l) / Σ N_l.
    pub fn global_sparsity(&self) -> f64 {
        1.0 - self.total_active() as f64 / self.total_len() as f64
    }

    /// True when every cached k_l matches a recount of the bits.
    pub fn counts_consistent(&self) -> bool {
        self.layers.iter().all(|l| l.recount() == l.active)
    }

    /// Errors unless names and shapes line up with the maskable layers of `spec`.
    pub fn check_against(&self, spec: &ArchSpec) -> Result<()> {
        let layers = spec.maskable_layers()?;
        if layers.len() != self.layers.len() {
            return Err(Error::input(format!(
                "mask has {} layers, architecture has {} maskable layers",
                self.layers.len(),
                layers.len()
            )));
        }
        for (m, l) in self.layers.iter().zip(&layers) {
            if m.shape != l.weight_shape {
                return Err(Error::input(format!(
                    "mask layer '{}' has shape {:?}, architecture layer '{}' has {:?}",
                    m.name, m.shape, l.name, l.weight_shape
                )));
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let ckpt = MaskCheckpoint {
            layers: self
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    name: l.name.clone(),
                    shape: l.shape.clone(),
                    active: l.active_indices(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let ckpt: MaskCheckpoint = serde_json::from_str(text)?;
        let layers = ckpt
            .layers
            .into_iter()
            .map(|l| LayerMask::from_active(l.name, &l.shape, &l.active))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(layers))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Random masks with `k_l = round((1 − s_l)·N_l)` active weights per layer,
/// drawn uniformly without replacement. Deterministic in `seed`.
pub fn init_masks(spec: &ArchSpec, sparsities: &[f64], seed: u64) -> Result<MaskSet> {
    let layers = spec.maskable_layers()?;
    check_sparsities(&layers, sparsities)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = layers
        .iter()
        .zip(sparsities)
        .map(|(layer, &s)| {
            let n = layer.parameter_count();
            let k = active_count_for(n, s);
            let mut active = rand::seq::index::sample(&mut rng, n, k).into_vec();
            active.sort_unstable();
            LayerMask::from_active(layer.name.clone(), &layer.weight_shape, &active)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet::new(masks))
}

/// Channel-granular masks: whole output channels of conv layers are active or
/// not, and linear layers are fully dense.
pub fn init_channel_masks(spec: &ArchSpec, sparsities: &[f64], seed: u64) -> Result<MaskSet> {
    let layers = spec.maskable_layers()?;
    check_sparsities(&layers, sparsities)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = layers
        .iter()
        .zip(sparsities)
        .map(|(layer, &s)| {
            if !layer.is_conv {
                return Ok(LayerMask::dense(layer.name.clone(), &layer.weight_shape));
            }
            let channels = layer.out_channels;
            let per_channel = layer.parameter_count() / channels;
            let keep = active_count_for(channels, s);
            let mut chosen = rand::seq::index::sample(&mut rng, channels, keep).into_vec();
            chosen.sort_unstable();
            let active: Vec<usize> = chosen
                .iter()
                .flat_map(|&c| c * per_channel..(c + 1) * per_channel)
                .collect();
            LayerMask::from_active(layer.name.clone(), &layer.weight_shape, &active)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet::new(masks))
}

fn check_sparsities(layers: &[MaskableLayer], sparsities: &[f64]) -> Result<()> {
    if layers.len() != sparsities.len() {
        return Err(Error::input(format!(
            "{} sparsities given for {} maskable layers",
            sparsities.len(),
            layers.len()
        )));
    }
    if let Some(bad) = sparsities.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::input(format!("layer sparsity {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Zeroes masked-out weights in each tensor (one tensor per mask layer).
pub fn apply_mask<'a>(masks: &MaskSet, weights: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
    let mut seen = 0;
    for (mask, w) in masks.layers().iter().zip(weights) {
        if w.shape() != mask.shape() {
            return Err(Error::Shape {
                expected: mask.shape().to_vec(),
                actual: w.shape().to_vec(),
            });
        }
        mask.apply(w.values_mut())?;
        seen += 1;
    }
    if seen != masks.len() {
        return Err(Error::input(format!(
            "{} weight tensors for {} masks",
            seen,
            masks.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_mlp, build_small_cnn, build_wrn_22_2};

    #[test]
    fn erk_raw_factor_hand_value() {
        let layer = MaskableLayer {
            node: 0,
            name: "c".into(),
            weight_shape: vec![32, 16, 3, 3],
            in_channels: 16,
            out_channels: 32,
            kernel_h: 3,
            kernel_w: 3,
            is_conv: true,
            first_layer: false,
            output_positions: 1,
        };
        let f = raw_density_factor(&layer, Distribution::Erk);
        assert_eq!(f, 54.0 / 4608.0);
        assert!((f - 0.011719).abs() < 1e-6);
        assert_eq!(raw_density_factor(&layer, Distribution::Er), 48.0 / 512.0);
    }

    #[test]
    fn zero_sparsity_is_dense() {
        let spec = build_wrn_22_2();
        for d in [Distribution::Uniform, Distribution::Er, Distribution::Erk] {
            let s = solve_distribution(&spec, &SparsityConfig::new(0.0, d)).unwrap();
            assert!(s.iter().all(|&x| x.abs() < 1e-12), "{d:?}: {s:?}");
        }
    }

    #[test]
    fn global_sparsity_two_layer_hand_value() {
        let a = LayerMask::from_active("a", &[100], &(0..50).collect::<Vec<_>>()).unwrap();
        let b = LayerMask::from_active("b", &[300], &(0..30).collect::<Vec<_>>()).unwrap();
        let set = MaskSet::new(vec![a, b]);
        assert!((set.global_sparsity() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn uniform_keeps_first_layer_and_rescales() {
        let spec = build_wrn_22_2();
        let layers = spec.maskable_layers().unwrap();
        let s = solve_distribution(&spec, &SparsityConfig::new(0.9, Distribution::Uniform)).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(s[1..].iter().all(|&x| (x - s[1]).abs() < 1e-12));
        let n: Vec<f64> = layers.iter().map(|l| l.parameter_count() as f64).collect();
        let realized = s.iter().zip(&n).map(|(s, n)| s * n).sum::<f64>() / n.iter().sum::<f64>();
        assert!((realized - 0.9).abs() < 1e-12);

        let plain = SparsityConfig::new(0.9, Distribution::Uniform).with_first_layer_dense(false);
        let s = solve_distribution(&spec, &plain).unwrap();
        assert!(s.iter().all(|&x| (x - 0.9).abs() < 1e-12));
    }

    #[test]
    fn unachievable_reports_limit() {
        let spec = build_mlp(&[784, 300, 100, 10]).unwrap();
        let err = solve_distribution(&spec, &SparsityConfig::new(0.5, Distribution::Uniform))
            .unwrap_err()
            .to_string();
        assert!(err.contains("highest achievable sparsity"), "{err}");
        assert!(solve_distribution(&spec, &SparsityConfig::new(1.0, Distribution::Erk)).is_err());
    }

    #[test]
    fn active_count_rounding() {
        assert_eq!(active_count_for(100, 0.0), 100);
        assert_eq!(active_count_for(100, 1.0 - 1.0 / 100.0), 1);
        assert_eq!(active_count_for(100, 1.0), 1);
        assert_eq!(active_count_for(10, 0.85), 2); // 1.5 rounds up
    }

    #[test]
    fn init_masks_counts_and_determinism() {
        let spec = build_mlp(&[20, 30, 10]).unwrap();
        let m1 = init_masks(&spec, &[0.9, 0.5], 7).unwrap();
        let m2 = init_masks(&spec, &[0.9, 0.5], 7).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.active_counts(), vec![60, 150]);
        assert!(m1.counts_consistent());
        let m3 = init_masks(&spec, &[0.0, 0.0], 1).unwrap();
        assert_eq!(m3.total_active(), m3.total_len());
        assert!(init_masks(&spec, &[0.5], 1).is_err());
    }

    #[test]
    fn channel_masks_are_channel_constant() {
        let spec = build_small_cnn(&[1, 28, 28], 10).unwrap();
        let layers = spec.maskable_layers().unwrap();
        let s: Vec<f64> = layers.iter().map(|l| if l.is_conv { 0.5 } else { 0.0 }).collect();
        let masks = init_channel_masks(&spec, &s, 3).unwrap();
        for (m, l) in masks.layers().iter().zip(&layers) {
            if l.is_conv {
                let per = l.parameter_count() / l.out_channels;
                for chunk in m.bits().chunks(per) {
                    assert!(chunk.iter().all(|&b| b == chunk[0]));
                }
                assert_eq!(m.active_count(), per * l.out_channels / 2);
            } else {
                assert_eq!(m.active_count(), m.len());
            }
        }
    }

    #[test]
    fn apply_mask_cases() {
        let mut w = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dense = MaskSet::new(vec![LayerMask::dense("w", &[2, 2])]);
        apply_mask(&dense, [&mut w]).unwrap();
        assert_eq!(w.values(), &[1.0, 2.0, 3.0, 4.0]);

        let half = MaskSet::new(vec![LayerMask::from_active("w", &[2, 2], &[1, 2]).unwrap()]);
        apply_mask(&half, [&mut w]).unwrap();
        let once = w.clone();
        apply_mask(&half, [&mut w]).unwrap();
        assert_eq!(w, once);
        assert_eq!(w.values(), &[0.0, 2.0, 3.0, 0.0]);

        let none = MaskSet::new(vec![LayerMask::from_active("w", &[2, 2], &[]).unwrap()]);
        apply_mask(&none, [&mut w]).unwrap();
        assert!(w.values().iter().all(|&v| v == 0.0));

        let mut wrong = Tensor::zeros(&[4]);
        assert!(apply_mask(&none, [&mut wrong]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = build_mlp(&[8, 6, 4]).unwrap();
        let masks = init_masks(&spec, &[0.5, 0.25], 11).unwrap();
        let text = masks.to_json_string().unwrap();
        let back = MaskSet::from_json_str(&text).unwrap();
        assert_eq!(back, masks);
        assert_eq!(back.to_json_string().unwrap(), text);
        back.check_against(&spec).unwrap();
        let other = build_mlp(&[8, 5, 4]).unwrap();
        assert!(back.check_against(&other).is_err());
    }
}
