//! Python bindings: projections, budgets, hard pruning, checkpoints and the
//! pipeline stages. Pipeline summaries come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use chipnet_core::budgets::{BudgetKind, NetworkShape};
use chipnet_core::config::RunConfig;
use chipnet_core::datakit::{load_checkpoint, Checkpoint};
use chipnet_core::pipeline::{self, PruneOptions};
use chipnet_core::{projections, pruner, Error};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        Error::Diverged { .. } | Error::FatalPruning { .. } => PyRuntimeError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn kind(name: &str) -> PyResult<BudgetKind> {
    name.parse().map_err(to_py)
}

/// Serializes `value` and hands it to Python's `json.loads`.
fn to_dict<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
#[pyo3(signature = (x, beta, midpoint = 0.0))]
fn logistic(x: f64, beta: f64, midpoint: f64) -> f64 {
    projections::logistic(x, beta, midpoint)
}

#[pyfunction]
fn heaviside(z: f64, gamma: f64) -> f64 {
    projections::heaviside(z, gamma)
}

#[pyfunction]
#[pyo3(signature = (z, beta_round = 20.0))]
fn logistic_round(z: f64, beta_round: f64) -> f64 {
    projections::logistic_round(z, beta_round)
}

/// Layer table of a network: channels, feature area, kernel area and the
/// layer each one reads from.
#[pyclass(name = "NetworkShape", module = "chipnet", frozen)]
struct PyNetworkShape {
    inner: NetworkShape,
}

#[pymethods]
impl PyNetworkShape {
    /// Chain of layers given as `(channels, feature_area, kernel_area)`.
    #[staticmethod]
    fn chain(input_channels: usize, layers: Vec<(usize, usize, usize)>) -> PyResult<Self> {
        Ok(PyNetworkShape { inner: NetworkShape::chain(input_channels, &layers).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_description(text: &str) -> PyResult<Self> {
        Ok(PyNetworkShape { inner: NetworkShape::from_description(text).map_err(to_py)? })
    }

    fn description(&self) -> String {
        self.inner.description()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn mask_layout(&self) -> Vec<usize> {
        self.inner.mask_layout()
    }

    #[getter]
    fn total_channels(&self) -> usize {
        self.inner.total_channels()
    }

    /// Budget fraction (`channel`, `volume`, `parameter` or `flops`) of a
    /// flat mask vector.
    fn budget(&self, kind_name: &str, masks: Vec<f64>) -> PyResult<f64> {
        kind(kind_name)?.evaluate(&self.inner, &masks).map_err(to_py)
    }

    fn budget_gradient(&self, kind_name: &str, masks: Vec<f64>) -> PyResult<Vec<f64>> {
        kind(kind_name)?.gradient(&self.inner, &masks).map_err(to_py)
    }

    /// Binary mask of the largest-`z` channels that fits the budget.
    #[pyo3(signature = (z, kind_name, target, tie_break = None))]
    fn hard_prune(&self, z: Vec<f64>, kind_name: &str, target: f64, tie_break: Option<Vec<f64>>) -> PyResult<Vec<bool>> {
        let mask = pruner::hard_prune_ranked(&z, tie_break.as_deref(), kind(kind_name)?, target, &self.inner).map_err(to_py)?;
        Ok(mask.keep().to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.layers.len()
    }

    fn __repr__(&self) -> String {
        format!("NetworkShape(layers={}, channels={})", self.inner.layers.len(), self.inner.total_channels())
    }
}

/// Read-only view of a checkpoint file.
#[pyclass(name = "Checkpoint", module = "chipnet", frozen)]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint { inner: load_checkpoint(&path).map_err(to_py)? })
    }

    #[getter]
    fn stage(&self) -> &str {
        &self.inner.stage
    }

    #[getter]
    fn shape(&self) -> PyNetworkShape {
        PyNetworkShape { inner: self.inner.shape.clone() }
    }

    fn array_names(&self) -> Vec<String> {
        self.inner.arrays.iter().map(|a| a.name.clone()).collect()
    }

    /// `(shape, values)` of a stored array.
    fn array(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let a = self.inner.array(name).ok_or_else(|| PyValueError::new_err(format!("no array `{name}`")))?;
        Ok((a.shape.clone(), a.data.clone()))
    }

    /// Kept flags of the selected hard mask, if any.
    fn hard_mask(&self) -> Option<Vec<bool>> {
        self.inner.hard_mask.as_ref().map(|m| m.keep().to_vec())
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner.config)
    }
}

/// A validated run configuration; stage methods write into `out_dir`.
#[pyclass(name = "Run", module = "chipnet")]
struct PyRun {
    cfg: RunConfig,
}

#[pymethods]
impl PyRun {
    /// Parses TOML text with optional `key=value` overrides.
    #[new]
    #[pyo3(signature = (toml_text, overrides = Vec::new()))]
    fn new(toml_text: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyRun { cfg: RunConfig::from_toml_str(toml_text, &overrides).map_err(to_py)? })
    }

    /// Reads a TOML config or a run manifest.
    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyRun { cfg: RunConfig::load(&path, &overrides).map_err(to_py)? })
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.cfg.out_dir.clone()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.cfg.to_toml_string().map_err(to_py)
    }

    fn pretrain<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = self.cfg.clone();
        let summary = py.detach(move || pipeline::pretrain(&cfg)).map_err(to_py)?;
        to_dict(py, &summary)
    }

    #[pyo3(signature = (resume = false, stop_after = None))]
    fn prune<'py>(&self, py: Python<'py>, resume: bool, stop_after: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = self.cfg.clone();
        let summary = py.detach(move || pipeline::prune(&cfg, PruneOptions { resume, stop_after })).map_err(to_py)?;
        to_dict(py, &summary)
    }

    #[pyo3(signature = (source = None))]
    fn finetune<'py>(&self, py: Python<'py>, source: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = self.cfg.clone();
        let summary = py.detach(move || pipeline::finetune(&cfg, source.as_deref())).map_err(to_py)?;
        to_dict(py, &summary)
    }

    #[pyo3(signature = (checkpoint, all_ones = false))]
    fn evaluate<'py>(&self, py: Python<'py>, checkpoint: PathBuf, all_ones: bool) -> PyResult<Bound<'py, PyAny>> {
        let cfg = self.cfg.clone();
        let summary = py.detach(move || pipeline::evaluate_checkpoint(&cfg, &checkpoint, all_ones)).map_err(to_py)?;
        to_dict(py, &summary)
    }

    fn transfer_mask<'py>(&self, py: Python<'py>, mask_file: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let summary = pipeline::transfer_mask_file(&self.cfg, &mask_file).map_err(to_py)?;
        to_dict(py, &summary)
    }

    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let summary = pipeline::report(&self.cfg.out_dir).map_err(to_py)?;
        to_dict(py, &summary)
    }
}

#[pymodule]
fn chipnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(logistic, m)?)?;
    m.add_function(wrap_pyfunction!(heaviside, m)?)?;
    m.add_function(wrap_pyfunction!(logistic_round, m)?)?;
    m.add_class::<PyNetworkShape>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyRun>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
