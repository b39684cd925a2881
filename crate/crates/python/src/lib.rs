//! Python bindings: build with `maturin develop` from this directory.
//!
//! Structured values (configs, metrics, reports, tasks) cross the boundary as
//! plain dicts via JSON.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mmaml::eval::{self, Stage};
use mmaml::meta::{ModelKind, TrainingConfig};
use mmaml::tasks::{ModeSet, Points, RngStream, TaskDistribution, TaskSpec};
use mmaml::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Task(_) | Error::NoEncoder(_) | Error::EmptySupport | Error::LengthMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) | Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn mode_set(modes: usize) -> PyResult<ModeSet> {
    ModeSet::with_count(modes).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn points(x: Vec<f64>, y: Vec<f64>) -> PyResult<Points> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err(format!("support x has {} values, y has {}", x.len(), y.len())));
    }
    let mut p = Points { x, y };
    p.sort_by_x();
    Ok(p)
}

/// A meta-learner of one kind: "mmaml", "maml", "multi-maml" or "lstm-learner".
#[pyclass(module = "mmaml_py")]
struct Model {
    inner: mmaml::meta::Model,
}

#[pymethods]
impl Model {
    /// Keyword arguments override `TrainingConfig` fields, e.g.
    /// `Model("mmaml", iterations=100, modes=3)`.
    #[new]
    #[pyo3(signature = (kind = "mmaml", **config))]
    fn new(py: Python<'_>, kind: &str, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))?;
        let cfg: TrainingConfig = match config {
            Some(d) => from_py(py, d.as_any())?,
            None => TrainingConfig::default(),
        };
        Ok(Self { inner: mmaml::meta::Model::init(kind, cfg).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: mmaml::checkpoint::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        mmaml::checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.inner.iteration
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// One meta-iteration; returns its metrics.
    fn step(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let m = py.detach(|| self.inner.step()).map_err(py_err)?;
        to_py(py, &m)
    }

    /// Runs `iterations` more meta-iterations (default: up to the configured
    /// budget) and returns the per-iteration metrics.
    #[pyo3(signature = (iterations = None))]
    fn train(&mut self, py: Python<'_>, iterations: Option<usize>) -> PyResult<Py<PyAny>> {
        let target = iterations.map_or(self.inner.config.iterations, |n| self.inner.iteration + n);
        let inner = &mut self.inner;
        let metrics = py
            .detach(|| {
                let mut out = Vec::new();
                while inner.iteration < target {
                    out.push(inner.step()?);
                }
                Ok::<_, Error>(out)
            })
            .map_err(py_err)?;
        to_py(py, &metrics)
    }

    /// Evaluation report on fresh tasks from the first `modes` families
    /// (default: the training mode set).
    #[pyo3(signature = (tasks_per_mode = 100, seed = mmaml::config::DEFAULT_EVAL_SEED, modes = None))]
    fn evaluate(&self, py: Python<'_>, tasks_per_mode: usize, seed: u64, modes: Option<usize>) -> PyResult<Py<PyAny>> {
        let modes = match modes {
            Some(n) => mode_set(n)?,
            None => self.inner.config.modes.clone(),
        };
        let report = py.detach(|| eval::evaluate(&self.inner, &modes, tasks_per_mode, seed)).map_err(py_err)?;
        to_py(py, &report)
    }

    /// Task embedding of a support set.
    fn embed(&self, support_x: Vec<f64>, support_y: Vec<f64>) -> PyResult<Vec<f64>> {
        let support = points(support_x, support_y)?;
        let m = self.inner.members[0].params.modulation.as_ref().ok_or_else(|| py_err(Error::NoEncoder(self.kind())))?;
        let enc = m.encoder.try_map(&mut |t| mmaml::autodiff::Var::constant(t.clone())).map_err(|e| py_err(e.into()))?;
        let v = mmaml::autodiff::no_grad(|| mmaml::modulation::encode(&support, &enc)).map_err(py_err)?;
        Ok(v.value().data().to_vec())
    }

    /// Predictions at `x` given a support set. `stage` is "prior",
    /// "post_modulation" or "post_adaptation"; `mode_label` routes Multi-MAML.
    #[pyo3(signature = (x, support_x, support_y, stage = "post_adaptation", mode_label = 0))]
    fn predict(&self, x: Vec<f64>, support_x: Vec<f64>, support_y: Vec<f64>, stage: &str, mode_label: usize) -> PyResult<Vec<f64>> {
        let stage: Stage = serde_json::from_value(serde_json::Value::String(stage.into())).map_err(|_| PyValueError::new_err(format!("unknown stage {stage:?}")))?;
        eval::predict(&self.inner, mode_label, &points(support_x, support_y)?, &x, stage).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={:?}, iteration={})", self.kind(), self.inner.iteration)
    }
}

/// `count` tasks from the first `modes` families, as dicts with `spec`,
/// `mode_label`, `support` and `query`.
#[pyfunction]
#[pyo3(signature = (modes = 2, count = 1, seed = 0, noise_sigma = mmaml::tasks::DEFAULT_NOISE_SIGMA))]
fn sample_tasks(py: Python<'_>, modes: usize, count: usize, seed: u64, noise_sigma: f64) -> PyResult<Py<PyAny>> {
    let dist = TaskDistribution::new(mode_set(modes)?, mmaml::tasks::DEFAULT_K, mmaml::tasks::DEFAULT_L, noise_sigma)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut rng = RngStream::new(seed);
    let tasks: Vec<_> = (0..count).map(|_| dist.sample(&mut rng)).collect();
    to_py(py, &tasks)
}

/// Noise-free value of a task spec dict (as produced by `sample_tasks`) at `x`.
#[pyfunction]
fn evaluate_function(py: Python<'_>, spec: &Bound<'_, PyAny>, x: Vec<f64>) -> PyResult<Vec<f64>> {
    let spec: TaskSpec = from_py(py, spec)?;
    Ok(x.iter().map(|&v| spec.evaluate(v)).collect())
}

#[pymodule]
fn mmaml_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(sample_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_function, m)?)?;
    m.add("EMBEDDING_DIM", mmaml::modulation::EMBEDDING_DIM)?;
    Ok(())
}
