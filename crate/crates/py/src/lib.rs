//! Python module `mtocksr`.
//!
//! Matrices cross the boundary as lists of rows; anything with the sequence
//! protocol (including 2-D numpy arrays) is accepted on input.

use std::path::PathBuf;

use mtoc_core::harness::dataset::Split;
use mtoc_core::harness::experiment::{run_experiment as run, DataLoader, ExperimentConfig};
use mtoc_core::harness::gradcheck::{gradcheck as check, GradTarget};
use mtoc_core::harness::synth::{synth_tasks, SynthSpec};
use mtoc_core::model::{ModelConfig, TrainedModel, Variant};
use mtoc_core::persist::{load_model, save_model};
use mtoc_core::{Error, Mat};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        3 => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Mat::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn from_mat(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[pyclass(name = "Model", module = "mtocksr")]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    /// Fits `variant` on task-contiguous training rows. `config` is an
    /// optional model config in TOML; its `variant` key is overridden.
    #[staticmethod]
    #[pyo3(signature = (x, task_ids, tasks, variant = "OCKSR-N", config = None))]
    fn fit(
        x: Vec<Vec<f64>>,
        task_ids: Vec<usize>,
        tasks: usize,
        variant: &str,
        config: Option<&str>,
    ) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(py_err)?;
        let mut cfg = match config {
            Some(text) => ModelConfig::from_toml(&format!("variant = \"{variant}\"\n{text}")).map_err(py_err)?,
            None => ModelConfig::new(variant),
        };
        cfg.variant = variant;
        let inner = TrainedModel::fit(&cfg, &to_mat(x)?, &task_ids, tasks).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(py_err)
    }

    /// Final responses, one column per task.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(from_mat(&self.inner.predict(&to_mat(x)?).map_err(py_err)?))
    }

    /// Dissimilarity to each task's targets; larger means less typical.
    fn score(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(from_mat(&self.inner.score(&to_mat(x)?).map_err(py_err)?))
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant().as_str()
    }

    #[getter]
    fn tasks(&self) -> usize {
        self.inner.tasks
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn theta(&self) -> Option<f64> {
        self.inner.theta
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint.clone()
    }

    /// Objective after initialization and after each accepted iteration.
    #[getter]
    fn objective(&self) -> Vec<f64> {
        self.inner.trace.objective.clone()
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        from_mat(&self.inner.a)
    }

    #[getter]
    fn b(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.b.as_ref().map(from_mat)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={:?}, tasks={}, samples={})",
            self.variant(),
            self.inner.tasks,
            self.inner.train_features.nrows()
        )
    }
}

/// Area under the ROC curve where a lower score means "more likely a target".
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    mtoc_core::ocksr::auc(&scores, &labels).map_err(py_err)
}

/// Synthetic related tasks as a dict of `features`, `task_ids`, `split`
/// (`"train"`/`"test"`) and `labels` (None for training rows).
#[pyfunction]
#[pyo3(signature = (tasks = 5, n_per_task = 15, dim = 20, rho = 0.8, seed = 0, unrelated = Vec::new()))]
fn synth<'py>(
    py: Python<'py>,
    tasks: usize,
    n_per_task: usize,
    dim: usize,
    rho: f64,
    seed: u64,
    unrelated: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = SynthSpec {
        tasks,
        n_per_task,
        dim,
        rho,
        seed,
        unrelated_tasks: unrelated,
        ..Default::default()
    };
    let b = synth_tasks(&spec).map_err(py_err)?;
    let split: Vec<&str> = b
        .split
        .iter()
        .map(|s| match s {
            Split::Train => "train",
            Split::Test => "test",
        })
        .collect();
    let d = PyDict::new(py);
    d.set_item("features", from_mat(&b.features))?;
    d.set_item("task_ids", b.task_ids)?;
    d.set_item("split", split)?;
    d.set_item("labels", b.labels)?;
    d.set_item("tasks", b.tasks)?;
    Ok(d)
}

/// Maximum relative error between analytic and central-difference gradients.
#[pyfunction]
#[pyo3(signature = (target, n = 10, tasks = 3, seed = 0, h = 1e-6))]
fn gradcheck(target: &str, n: usize, tasks: usize, seed: u64, h: f64) -> PyResult<f64> {
    let target: GradTarget = target.parse().map_err(py_err)?;
    Ok(check(target, n, tasks, seed, h).map_err(py_err)?.max_rel_error)
}

/// Runs an experiment from config text and returns the result table as JSON.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn run_experiment(py: Python<'_>, config: &str, out_dir: Option<PathBuf>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml(config).map_err(py_err)?;
    let table = py
        .detach(|| {
            let data = DataLoader::from_config(&cfg)?;
            run(&cfg, &data, out_dir.as_deref())
        })
        .map_err(py_err)?;
    Ok(serde_json::to_string(&table).expect("table serializes"))
}

#[pymodule]
fn mtocksr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
