//! Python bindings: datasets, networks, training, metrics and the oracle suite.
//!
//! Configuration objects cross the boundary as JSON strings in the same
//! schema the CLI reads.

use std::collections::BTreeSet;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use almauc::alm::{self, AlmConfig};
use almauc::constraint;
use almauc::data::{self, Covariance};
use almauc::experiments::{self, ModelSpec};
use almauc::losses::{LossKind, LossSpec};
use almauc::metrics;
use almauc::netcore::{Matrix, Mlp as CoreMlp};
use almauc::oracle::{self, toy};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Dataset", module = "almauc", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from feature rows and integer labels.
    #[new]
    #[pyo3(signature = (features, labels, num_classes, critical=None))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize, critical: Option<Vec<usize>>) -> PyResult<Self> {
        if features.len() != labels.len() {
            return Err(err("features and labels differ in length"));
        }
        let samples = features
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (features, label))| data::Sample {
                id: i as u64,
                features,
                label,
            })
            .collect();
        let critical: BTreeSet<usize> = match critical {
            Some(c) => c.into_iter().collect(),
            None => BTreeSet::from([if num_classes == 2 { 1 } else { num_classes - 1 }]),
        };
        Ok(Self {
            inner: data::Dataset::new(samples, num_classes, critical).map_err(err)?,
        })
    }

    /// Gaussian classes with diagonal covariances.
    #[staticmethod]
    fn gaussians(n_per_class: Vec<usize>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>, seed: u64) -> PyResult<Self> {
        let covs: Vec<Covariance> = variances.into_iter().map(Covariance::Diagonal).collect();
        Ok(Self {
            inner: data::gen_gaussians(&n_per_class, &means, &covs, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load_csv(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_csv(path.as_ref()).map_err(err)?,
        })
    }

    fn save_csv(&self, path: &str) -> PyResult<()> {
        data::save_csv(&self.inner, path.as_ref()).map_err(err)
    }

    fn subsample_to_ratio(&self, minority: usize, ratio: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: data::subsample_to_ratio(&self.inner, minority, ratio, seed).map_err(err)?,
        })
    }

    /// `k` stratified (train, validation) pairs.
    fn stratified_splits(&self, k: usize, fraction: f64, seed: u64) -> PyResult<Vec<(PyDataset, PyDataset)>> {
        Ok(data::stratified_splits(&self.inner, k, fraction, seed)
            .map_err(err)?
            .into_iter()
            .map(|s| (Self { inner: s.train }, Self { inner: s.validation }))
            .collect())
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.samples().iter().map(|s| s.features.clone()).collect()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts().to_vec()
    }

    fn critical_classes(&self) -> Vec<usize> {
        self.inner.critical_classes().iter().copied().collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Mlp", module = "almauc", skip_from_py_object)]
#[derive(Clone)]
struct PyMlp {
    inner: CoreMlp,
}

#[pymethods]
impl PyMlp {
    /// Network sized for `dataset`: one sigmoid output for binary data.
    #[staticmethod]
    #[pyo3(signature = (dataset, hidden=vec![32, 32], seed=0))]
    fn for_dataset(dataset: &PyDataset, hidden: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: ModelSpec { hidden }.build(&dataset.inner, seed).map_err(err)?,
        })
    }

    fn logits(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = Matrix::from_rows(&features).map_err(err)?;
        let z = self.inner.logits(&x).map_err(err)?;
        Ok(z.iter_rows().map(<[f64]>::to_vec).collect())
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params()
    }

    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(&params).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.to_checkpoint()).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let ckpt = serde_json::from_str(text).map_err(err)?;
        Ok(Self {
            inner: CoreMlp::from_checkpoint(&ckpt).map_err(err)?,
        })
    }
}

/// Trains `model` and returns `(model, constraint_state_json, trace_json)`.
/// `loss` and `alm_config` are JSON, e.g. `{"kind": "bce"}` and `{"mu0": 1e-4}`.
#[pyfunction]
#[pyo3(signature = (model, train_set, validation, loss="{\"kind\":\"bce\"}", alm_config="{}"))]
fn train(
    py: Python<'_>,
    model: &PyMlp,
    train_set: &PyDataset,
    validation: &PyDataset,
    loss: &str,
    alm_config: &str,
) -> PyResult<(PyMlp, String, String)> {
    let kind: LossKind = serde_json::from_str(loss).map_err(err)?;
    let cfg: AlmConfig = serde_json::from_str(alm_config).map_err(err)?;
    let spec = LossSpec::new(kind, train_set.inner.class_counts().to_vec()).map_err(err)?;
    let model = model.inner.clone();
    let out = py
        .detach(|| alm::train(model, &train_set.inner, &validation.inner, &spec, &cfg))
        .map_err(err)?;
    Ok((
        PyMlp { inner: out.model },
        serde_json::to_string(&out.state).map_err(err)?,
        serde_json::to_string(&out.trace).map_err(err)?,
    ))
}

/// Test metrics of a model as JSON.
#[pyfunction]
fn evaluate(model: &PyMlp, dataset: &PyDataset) -> PyResult<String> {
    let m = experiments::evaluate_model(&model.inner, &dataset.inner).map_err(err)?;
    serde_json::to_string(&m).map_err(err)
}

#[pyfunction]
fn auc(positives: Vec<f64>, negatives: Vec<f64>) -> PyResult<f64> {
    metrics::auc_mann_whitney(&positives, &negatives).map_err(err)
}

/// `(fpr, tpr)` points of the ROC curve.
#[pyfunction]
fn roc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Vec<(f64, f64)>> {
    let c = metrics::roc(&scores, &labels).map_err(err)?;
    Ok(c.points.iter().map(|p| (p.fpr, p.tpr)).collect())
}

#[pyfunction]
fn fpr_at_tpr(scores: Vec<f64>, labels: Vec<bool>, target: f64) -> PyResult<f64> {
    let c = metrics::roc(&scores, &labels).map_err(err)?;
    metrics::fpr_at_tpr(&c, target).map_err(err)
}

/// Per-positive hinge sums against all negatives.
#[pyfunction]
fn q_values(positives: Vec<f64>, negatives: Vec<f64>, delta: f64) -> Vec<f64> {
    constraint::q_values(&positives, &negatives, delta)
}

/// `(quadratic, linear)` penalty terms, normalised by the pair count.
#[pyfunction]
fn penalty_terms(q: Vec<f64>, lambdas: Vec<f64>, mu: f64, p_count: usize, n_count: usize) -> PyResult<(f64, f64)> {
    let t = constraint::penalty_terms(&q, &lambdas, mu, p_count, n_count).map_err(err)?;
    Ok((t.quadratic, t.linear))
}

/// Runs the oracle suite; returns `(passed, report_json)`.
#[pyfunction]
#[pyo3(signature = (seed=0, gradient_trials=100, random_instances=1000))]
fn verify(py: Python<'_>, seed: u64, gradient_trials: usize, random_instances: usize) -> PyResult<(bool, String)> {
    let opts = oracle::VerifyOptions {
        seed,
        gradient_trials,
        random_instances,
    };
    let report = py.detach(|| oracle::run_verify(&opts)).map_err(err)?;
    Ok((!report.has_failure(), serde_json::to_string(&report).map_err(err)?))
}

/// Toy layouts matching both published swap decrements, as `N`/`P` strings.
#[pyfunction]
fn toy_consistent_layouts() -> Vec<String> {
    toy::consistent_layouts().iter().map(|m| m.layout.to_string()).collect()
}

#[pymodule]
#[pyo3(name = "almauc")]
fn almauc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyMlp>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(roc, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(q_values, m)?)?;
    m.add_function(wrap_pyfunction!(penalty_terms, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(toy_consistent_layouts, m)?)?;
    Ok(())
}
