//! Python bindings: configuration, the training loop, checkpoint
//! inspection and the analysis passes in one extension module.
//!
//! Reports cross the boundary as plain dicts/lists so the Python side
//! needs nothing beyond the stdlib. See `python/smoke.py` for the
//! build-and-import flow.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use hicl_core::analysis::{jaccard_analysis, prototype_similarity_matrix, routing_accuracy};
use hicl_core::flops::count_flops;
use hicl_core::trainer::{build_stream, class_il_accuracy, run_stream, task_il_accuracy};
use hicl_core::{CheckpointData, GatingMode, HiclError, HiclModel, RunConfig};

fn pyerr(e: HiclError) -> PyErr {
    match e {
        HiclError::Io { .. } | HiclError::Format { .. } | HiclError::Checkpoint(_) => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<PyObject> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_py(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py(py)
            }
        }
        Value::String(s) => s.into_py(py),
        Value::Array(items) => {
            let list = PyList::empty_bound(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new_bound(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_py(py)
        }
    })
}

fn serialize_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

/// Run configuration. Construct from a JSON file or string; tweak either
/// through the exposed properties or by round-tripping `to_json` through
/// Python's `json` module.
#[pyclass]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    /// Built-in defaults (five synthetic tasks).
    #[new]
    fn new() -> Self {
        Config {
            inner: RunConfig::default(),
        }
    }

    /// Parse a JSON config file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Config {
            inner: RunConfig::load(&path).map_err(pyerr)?,
        })
    }

    /// Parse a JSON string.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: RunConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(pyerr)?;
        Ok(Config { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// The whole config as a nested dict.
    fn to_dict(&self, py: Python<'_>) -> PyResult<PyObject> {
        serialize_to_py(py, &self.inner)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn n_experts(&self) -> usize {
        self.inner.n_experts
    }

    #[setter]
    fn set_n_experts(&mut self, v: usize) {
        self.inner.n_experts = v;
    }

    /// Active units per separation code, ⌊ρ·dg_dim⌋.
    #[getter]
    fn k(&self) -> usize {
        self.inner.encoder.k()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, n_experts={}, dg_dim={}, k={})",
            self.inner.seed,
            self.inner.n_experts,
            self.inner.encoder.dg_dim,
            self.inner.encoder.k()
        )
    }
}

/// A trained model restored from a checkpoint.
#[pyclass(unsendable)]
struct Model {
    inner: HiclModel,
    gating: GatingMode,
    seen_tasks: usize,
    config: RunConfig,
}

#[pymethods]
impl Model {
    /// Restore from a `task_<t>.ckpt` file written by training.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let restored = CheckpointData::load(&path)
            .map_err(pyerr)?
            .restore()
            .map_err(pyerr)?;
        Ok(Model {
            gating: restored.config.gating,
            seen_tasks: restored.seen_tasks,
            inner: restored.model,
            config: restored.config,
        })
    }

    #[getter]
    fn n_experts(&self) -> usize {
        self.inner.n_experts()
    }

    #[getter]
    fn seen_tasks(&self) -> usize {
        self.seen_tasks
    }

    fn config(&self) -> Config {
        Config {
            inner: self.config.clone(),
        }
    }

    /// Gated inference. Returns (global logits, selected expert ids).
    #[pyo3(signature = (x, conditional = true))]
    fn forward(&self, x: Vec<f64>, conditional: bool) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let (logits, decision) = self
            .inner
            .moe_forward(&x, self.gating, conditional)
            .map_err(pyerr)?;
        Ok((logits, decision.selected_experts))
    }

    /// Per-expert routing similarities for one input.
    fn routing_scores(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let (_, decision) = self
            .inner
            .moe_forward(&x, self.gating, true)
            .map_err(pyerr)?;
        Ok(decision.similarities)
    }

    /// Shared backbone features for one input.
    fn features(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.backbone_features(&x).map_err(pyerr)?.to_vec())
    }

    /// One expert's sparse code: (values, active unit indices).
    fn dg_code(&self, x: Vec<f64>, expert: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let (code, _) = self.inner.forced_forward(&x, expert).map_err(pyerr)?;
        Ok((code.values.to_vec(), code.active_set))
    }

    /// Pairwise cosine matrix of the expert prototypes.
    fn prototype_similarities(&self) -> Vec<Vec<f64>> {
        prototype_similarity_matrix(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(n_experts={}, seen_tasks={})",
            self.inner.n_experts(),
            self.seen_tasks
        )
    }
}

/// Train the configured task stream. With `out_dir` set, writes the same
/// checkpoint/metrics/report files as the CLI. Returns the final report
/// as a dict.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn train(py: Python<'_>, config: &Config, out_dir: Option<PathBuf>) -> PyResult<PyObject> {
    let cfg = config.inner.clone();
    let (report, _) = py
        .allow_threads(move || run_stream(&cfg, out_dir.as_deref()))
        .map_err(pyerr)?;
    serialize_to_py(py, &report)
}

/// Re-evaluate a checkpoint on its own (regenerated) task stream:
/// per-task accuracies under task-aware and global heads, plus routing.
#[pyfunction]
fn evaluate(py: Python<'_>, checkpoint: PathBuf) -> PyResult<PyObject> {
    let restored = CheckpointData::load(&checkpoint)
        .map_err(pyerr)?
        .restore()
        .map_err(pyerr)?;
    let stream = build_stream(&restored.config).map_err(pyerr)?;
    let mut task_il = Vec::new();
    let mut class_il = Vec::new();
    for t in 0..restored.seen_tasks {
        task_il.push(task_il_accuracy(&restored.model, &stream.tasks[t], t).map_err(pyerr)?);
        class_il.push(class_il_accuracy(&restored.model, &stream.tasks[t], t).map_err(pyerr)?);
    }
    let routing =
        routing_accuracy(&restored.model, &stream, restored.seen_tasks).map_err(pyerr)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;

    let out = PyDict::new_bound(py);
    out.set_item("seen_tasks", restored.seen_tasks)?;
    out.set_item("mean_task_il", mean(&task_il))?;
    out.set_item("mean_class_il", mean(&class_il))?;
    out.set_item("task_il_per_task", task_il)?;
    out.set_item("class_il_per_task", class_il)?;
    out.set_item("routing_accuracy", routing)?;
    Ok(out.into_py(py))
}

/// Per-forward FLOP counts for a config, including the conditional and
/// dense totals.
#[pyfunction]
fn flops(py: Python<'_>, config: &Config) -> PyResult<PyObject> {
    let classes_per_task = match &config.inner.dataset {
        hicl_core::config::DatasetConfig::Synthetic {
            classes_per_task, ..
        } => *classes_per_task,
        _ => 2,
    };
    serialize_to_py(py, &count_flops(&config.inner, classes_per_task))
}

/// Code-overlap structure of a trained checkpoint: mean Jaccard within and
/// across tasks, plus the full task×task matrix.
#[pyfunction]
#[pyo3(signature = (checkpoint, pairs = 200, seed = 0))]
fn jaccard(py: Python<'_>, checkpoint: PathBuf, pairs: usize, seed: u64) -> PyResult<PyObject> {
    let restored = CheckpointData::load(&checkpoint)
        .map_err(pyerr)?
        .restore()
        .map_err(pyerr)?;
    let stream = build_stream(&restored.config).map_err(pyerr)?;
    let report = jaccard_analysis(&restored.model, &stream, pairs, seed).map_err(pyerr)?;
    let out = PyDict::new_bound(py);
    out.set_item("intra", report.intra)?;
    out.set_item("inter", report.inter)?;
    out.set_item("matrix", report.matrix)?;
    Ok(out.into_py(py))
}

#[pymodule]
fn hicl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    Ok(())
}
