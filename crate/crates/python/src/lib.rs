use std::path::PathBuf;

use dst_core::flops::{forward_flops, FlopTrace};
use dst_core::harness::{self, TrainConfig};
use dst_core::schedulers;
use dst_core::sparsity::{init_masks, solve_distribution};
use dst_core::{ArchSpec, Distribution, Error, MaskSet, Method, SparsityConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Input(_) | Error::Config { .. } | Error::Shape { .. } | Error::Json(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) | Error::Format { .. } | Error::Csv(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Network architecture description.
#[pyclass(name = "Arch", module = "dst", from_py_object)]
#[derive(Clone)]
struct PyArch {
    inner: ArchSpec,
}

#[pymethods]
impl PyArch {
    /// Built-in architecture: "mlp", "small-cnn", "wrn-22-2", "resnet50-cifar".
    #[staticmethod]
    fn by_name(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ArchSpec::by_name(name).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ArchSpec::from_json_str(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json_string().map_err(to_py)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Names of the conv and linear layers, in mask order.
    fn maskable_layers(&self) -> PyResult<Vec<String>> {
        Ok(self
            .inner
            .maskable_layers()
            .map_err(to_py)?
            .into_iter()
            .map(|l| l.name)
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Arch('{}', {} params)", self.inner.name, self.inner.parameter_count())
    }
}

/// Per-layer boolean weight masks.
#[pyclass(name = "MaskSet", module = "dst", from_py_object)]
#[derive(Clone)]
struct PyMaskSet {
    inner: MaskSet,
}

#[pymethods]
impl PyMaskSet {
    /// Random masks with the given per-layer sparsities.
    #[staticmethod]
    fn random(arch: &PyArch, sparsities: Vec<f64>, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: init_masks(&arch.inner, &sparsities, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: MaskSet::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json_string().map_err(to_py)
    }

    fn densities(&self) -> Vec<f64> {
        self.inner.densities()
    }

    fn active_counts(&self) -> Vec<usize> {
        self.inner.active_counts()
    }

    fn global_sparsity(&self) -> f64 {
        self.inner.global_sparsity()
    }

    /// Active flat indices of layer `layer`.
    fn active_indices(&self, layer: usize) -> PyResult<Vec<usize>> {
        if layer >= self.inner.len() {
            return Err(PyValueError::new_err(format!("no layer {layer}")));
        }
        Ok(self.inner.layer(layer).active_indices())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

fn sparsity_config(sparsity: f64, distribution: &str, keep_first_layer_dense: Option<bool>) -> PyResult<SparsityConfig> {
    let mut cfg = SparsityConfig::new(sparsity, Distribution::parse(distribution).map_err(to_py)?);
    cfg.keep_first_layer_dense = keep_first_layer_dense;
    Ok(cfg)
}

/// Per-layer sparsities realizing a global target under a distribution.
#[pyfunction]
#[pyo3(signature = (arch, sparsity, distribution = "erk", keep_first_layer_dense = None))]
fn layer_sparsities(
    arch: &PyArch,
    sparsity: f64,
    distribution: &str,
    keep_first_layer_dense: Option<bool>,
) -> PyResult<Vec<f64>> {
    let cfg = sparsity_config(sparsity, distribution, keep_first_layer_dense)?;
    solve_distribution(&arch.inner, &cfg).map_err(to_py)
}

/// FLOP report with f_d, f_s, train_flops, train_ratio and test_ratio.
#[pyfunction]
#[pyo3(signature = (arch, sparsity, distribution = "erk", method = "rigl", delta_t = 100, trace = None, keep_first_layer_dense = None))]
#[allow(clippy::too_many_arguments)]
fn flop_report<'py>(
    py: Python<'py>,
    arch: &PyArch,
    sparsity: f64,
    distribution: &str,
    method: &str,
    delta_t: usize,
    trace: Option<Vec<f64>>,
    keep_first_layer_dense: Option<bool>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = sparsity_config(sparsity, distribution, keep_first_layer_dense)?;
    let densities: Vec<f64> = solve_distribution(&arch.inner, &cfg)
        .map_err(to_py)?
        .iter()
        .map(|s| 1.0 - s)
        .collect();
    let trace = trace.map(FlopTrace::from_snapshots);
    let report = forward_flops(&arch.inner, Some(&densities))
        .and_then(|r| r.with_training(Method::parse(method)?, delta_t, trace.as_ref()))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("f_d", report.f_d)?;
    d.set_item("f_s", report.f_s)?;
    d.set_item("train_flops", report.train_flops)?;
    d.set_item("train_ratio", report.train_ratio)?;
    d.set_item("test_ratio", report.test_ratio)?;
    Ok(d)
}

/// Cosine-annealed drop fraction at step `t`.
#[pyfunction]
fn prune_fraction(t: usize, alpha: f64, t_end: usize) -> f64 {
    schedulers::prune_fraction(t, alpha, t_end)
}

#[pyfunction]
fn should_update(t: usize, delta_t: usize, t_end: usize) -> bool {
    schedulers::should_update(t, delta_t, t_end)
}

/// JSON of the built-in MNIST/MLP training config.
#[pyfunction]
fn default_config() -> PyResult<String> {
    TrainConfig::default().to_json_string().map_err(to_py)
}

/// Trains a config given as JSON. Returns per-epoch metrics and the final
/// masks; run files are written under `out` when given.
#[pyfunction]
#[pyo3(signature = (config_json, out = None))]
fn train<'py>(py: Python<'py>, config_json: &str, out: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = TrainConfig::from_json_str(config_json).map_err(to_py)?;
    let result = py
        .detach(|| harness::run(&cfg, out.as_deref()))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    let rows: Vec<Bound<'py, PyDict>> = result
        .metrics
        .iter()
        .map(|m| {
            let r = PyDict::new(py);
            r.set_item("epoch", m.epoch)?;
            r.set_item("train_loss", m.train_loss)?;
            r.set_item("val_accuracy", m.val_accuracy)?;
            r.set_item("test_accuracy", m.test_accuracy)?;
            r.set_item("sparsity", m.sparsity)?;
            r.set_item("f_s", m.f_s)?;
            r.set_item("train_flops", m.train_flops)?;
            Ok(r)
        })
        .collect::<PyResult<_>>()?;
    d.set_item("metrics", rows)?;
    d.set_item("masks", PyMaskSet { inner: result.masks })?;
    d.set_item("total_train_flops", result.total_train_flops)?;
    d.set_item("dir", result.dir.map(|p| p.display().to_string()))?;
    Ok(d)
}

#[pymodule]
fn dst(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyArch>()?;
    m.add_class::<PyMaskSet>()?;
    m.add_function(wrap_pyfunction!(layer_sparsities, m)?)?;
    m.add_function(wrap_pyfunction!(flop_report, m)?)?;
    m.add_function(wrap_pyfunction!(prune_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(should_update, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
