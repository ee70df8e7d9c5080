//! Theoretical FLOP accounting.
//!
//! Only convolution and linear layers carry cost: a multiply-accumulate is two
//! FLOPs, and a layer at density `d` costs `d` times its dense count
//! (unstructured sparsity is assumed to be exploitable). Activations, pooling,
//! normalization, residual sums and biases are free.

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::schedulers::Method;
use crate::sparsity::MaskSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub dense: f64,
    pub density: f64,
    pub sparse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    /// Dense forward FLOPs.
    pub f_d: f64,
    /// Sparse forward FLOPs under the given densities.
    pub f_s: f64,
    pub per_layer: Vec<LayerFlops>,
    /// Average train FLOPs per step, when a method was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_flops: Option<f64>,
    /// `train_flops / 3f_d`, rounded to two decimals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_ratio: Option<f64>,
    /// `f_s / f_d`, rounded to two decimals.
    pub test_ratio: f64,
}

impl FlopReport {
    pub fn test_ratio_exact(&self) -> f64 {
        self.f_s / self.f_d
    }

    pub fn train_ratio_exact(&self) -> Option<f64> {
        self.train_flops.map(|t| t / (3.0 * self.f_d))
    }

    /// Fills in the train-FLOP fields for `method`.
    pub fn with_training(
        mut self,
        method: Method,
        delta_t: usize,
        trace: Option<&FlopTrace>,
    ) -> Result<Self> {
        let sparse = match trace {
            Some(t) => SparseFlops::Trace(t),
            None => SparseFlops::Constant(self.f_s),
        };
        let train = train_flops(method, self.f_d, sparse, delta_t)?;
        self.train_flops = Some(train);
        self.train_ratio = Some(round2(train / (3.0 * self.f_d)));
        Ok(self)
    }

    /// Aligned human-readable table.
    pub fn to_text(&self) -> String {
        let width = self
            .per_layer
            .iter()
            .map(|l| l.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!(
            "{:<width$}  {:>14}  {:>8}  {:>14}\n",
            "layer", "dense", "density", "sparse"
        );
        for l in &self.per_layer {
            out.push_str(&format!(
                "{:<width$}  {:>14.4e}  {:>8.4}  {:>14.4e}\n",
                l.name, l.dense, l.density, l.sparse
            ));
        }
        out.push_str(&format!("{:<14}{:.4e}\n", "f_d", self.f_d));
        out.push_str(&format!("{:<14}{:.4e}\n", "f_s", self.f_s));
        if let (Some(t), Some(r)) = (self.train_flops, self.train_ratio) {
            out.push_str(&format!("{:<14}{:.4e}\n", "train_flops", t));
            out.push_str(&format!("{:<14}{:.2}x\n", "train_ratio", r));
        }
        out.push_str(&format!("{:<14}{:.2}x\n", "test_ratio", self.test_ratio));
        out
    }

    /// Machine-readable summary with the documented top-level fields.
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "f_d": self.f_d,
            "f_s": self.f_s,
            "train_flops": self.train_flops,
            "train_ratio": self.train_ratio,
            "test_ratio": self.test_ratio,
            "per_layer": self.per_layer,
        })
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Forward-pass FLOPs. `densities` (one per maskable layer) defaults to all ones.
pub fn forward_flops(spec: &ArchSpec, densities: Option<&[f64]>) -> Result<FlopReport> {
    let layers = spec.maskable_layers()?;
    if let Some(d) = densities {
        if d.len() != layers.len() {
            return Err(Error::input(format!(
                "{} densities given for {} maskable layers",
                d.len(),
                layers.len()
            )));
        }
        if let Some(bad) = d.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::input(format!("density {bad} outside [0, 1]")));
        }
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    let (mut f_d, mut f_s) = (0.0, 0.0);
    for (i, layer) in layers.iter().enumerate() {
        let dense = layer.dense_flops();
        let density = densities.map_or(1.0, |d| d[i]);
        let sparse = density * dense;
        f_d += dense;
        f_s += sparse;
        per_layer.push(LayerFlops {
            name: layer.name.clone(),
            dense,
            density,
            sparse,
        });
    }
    Ok(FlopReport {
        f_d,
        f_s,
        per_layer,
        train_flops: None,
        train_ratio: None,
        test_ratio: round2(f_s / f_d),
    })
}

/// Per-epoch snapshots of the sparse forward cost and their running mean.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopTrace {
    snapshots: Vec<f64>,
    sum: f64,
}

impl FlopTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_snapshots(snapshots: Vec<f64>) -> Self {
        let sum = snapshots.iter().sum();
        Self { snapshots, sum }
    }

    pub fn push(&mut self, f_s: f64) {
        self.snapshots.push(f_s);
        self.sum += f_s;
    }

    /// Appends the forward cost of the current masks and returns it.
    pub fn record_epoch(&mut self, spec: &ArchSpec, masks: &MaskSet) -> Result<f64> {
        let f_s = forward_flops(spec, Some(&masks.densities()))?.f_s;
        self.push(f_s);
        Ok(f_s)
    }

    pub fn snapshots(&self) -> &[f64] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// E[f_{s,t}]; `None` before the first snapshot.
    pub fn mean(&self) -> Option<f64> {
        (!self.snapshots.is_empty()).then(|| self.sum / self.snapshots.len() as f64)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SparseFlops<'a> {
    Constant(f64),
    Trace(&'a FlopTrace),
}

impl SparseFlops<'_> {
    fn value(&self) -> Result<f64> {
        match self {
            SparseFlops::Constant(v) => Ok(*v),
            SparseFlops::Trace(t) => t
                .mean()
                .ok_or_else(|| Error::input("FLOP trace has no snapshots")),
        }
    }
}

/// Average train FLOPs per step.
///
/// * static, SET: `3 f_s`
/// * RigL (and its channel variant): `(3ΔT f_s + 2 f_s + f_d) / (ΔT + 1)`
/// * RigL-SG / RigL-SM: the RigL formula with `E[f_{s,t}]`
/// * SNFS: `2 E[f_{s,t}] + f_d`
/// * pruning: `3 E[f_{s,t}]`
///
/// Methods whose sparsity varies over training need a [`FlopTrace`].
pub fn train_flops(method: Method, f_d: f64, sparse: SparseFlops<'_>, delta_t: usize) -> Result<f64> {
    let needs_trace = matches!(
        method,
        Method::Snfs | Method::Pruning | Method::RiglSg | Method::RiglSm
    );
    if needs_trace && matches!(sparse, SparseFlops::Constant(_)) {
        return Err(Error::input(format!(
            "{} train FLOPs need a FLOP trace",
            method.name()
        )));
    }
    let f_s = sparse.value()?;
    let rigl = |f_s: f64| -> Result<f64> {
        if delta_t == 0 {
            return Err(Error::input("delta_t must be at least 1"));
        }
        let dt = delta_t as f64;
        Ok((3.0 * dt * f_s + 2.0 * f_s + f_d) / (dt + 1.0))
    };
    match method {
        Method::Static | Method::Set => Ok(3.0 * f_s),
        Method::Rigl | Method::RiglStruct | Method::RiglSg | Method::RiglSm => rigl(f_s),
        Method::Snfs => Ok(2.0 * f_s + f_d),
        Method::Pruning => Ok(3.0 * f_s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_mlp, ArchSpec, LayerDecl, LayerKind};

    fn single_conv() -> ArchSpec {
        let mut conv = LayerDecl::new(
            "conv",
            LayerKind::Conv2d {
                in_channels: 3,
                out_channels: 16,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
        );
        conv.first_layer = true;
        ArchSpec {
            name: "one-conv".into(),
            input_shape: vec![3, 32, 32],
            layers: vec![
                conv,
                LayerDecl::new("pool", LayerKind::AvgPool2d { kernel: 32, stride: 32 }),
                LayerDecl::new("flatten", LayerKind::Flatten),
            ],
            class_count: 16,
        }
    }

    #[test]
    fn conv_hand_count() {
        let report = forward_flops(&single_conv(), None).unwrap();
        assert_eq!(report.f_d, 884_736.0);
        assert_eq!(report.f_s, report.f_d);
    }

    #[test]
    fn density_out_of_range() {
        let spec = single_conv();
        assert!(forward_flops(&spec, Some(&[1.5])).is_err());
        assert!(forward_flops(&spec, Some(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn layer_linearity() {
        let spec = build_mlp(&[20, 10, 5]).unwrap();
        let a = forward_flops(&spec, Some(&[0.25, 0.5])).unwrap();
        let b = forward_flops(&spec, Some(&[0.5, 0.5])).unwrap();
        assert_eq!(b.f_s - a.f_s, 0.25 * a.per_layer[0].dense);
    }

    #[test]
    fn rigl_formula_limits() {
        let (f_d, f_s) = (1000.0, 100.0);
        let one = train_flops(Method::Rigl, f_d, SparseFlops::Constant(f_s), 1).unwrap();
        assert_eq!(one, (5.0 * f_s + f_d) / 2.0);
        let huge = train_flops(Method::Rigl, f_d, SparseFlops::Constant(f_s), 1 << 40).unwrap();
        assert!((huge - 3.0 * f_s).abs() < 1e-6);
    }

    #[test]
    fn trace_required_for_time_varying_methods() {
        for m in [Method::Snfs, Method::Pruning, Method::RiglSg, Method::RiglSm] {
            assert!(train_flops(m, 1.0, SparseFlops::Constant(0.5), 100).is_err());
        }
        let empty = FlopTrace::new();
        assert!(train_flops(Method::Snfs, 1.0, SparseFlops::Trace(&empty), 100).is_err());
    }

    #[test]
    fn trace_mean() {
        let mut t = FlopTrace::new();
        assert_eq!(t.mean(), None);
        t.push(100.0);
        t.push(300.0);
        assert_eq!(t.mean(), Some(200.0));
        let constant = FlopTrace::from_snapshots(vec![42.0; 7]);
        assert_eq!(constant.mean(), Some(42.0));
    }

    #[test]
    fn method_ordering_at_equal_sparse_cost() {
        let f_d = 10.0;
        for &f_s in &[0.5, 2.0, 9.0] {
            let trace = FlopTrace::from_snapshots(vec![f_s]);
            for dt in [1, 2, 100, 1000] {
                let set = train_flops(Method::Set, f_d, SparseFlops::Constant(f_s), dt).unwrap();
                let rigl = train_flops(Method::Rigl, f_d, SparseFlops::Constant(f_s), dt).unwrap();
                let snfs = train_flops(Method::Snfs, f_d, SparseFlops::Trace(&trace), dt).unwrap();
                assert!(set <= rigl && rigl <= snfs, "{set} {rigl} {snfs}");
            }
        }
    }
}
