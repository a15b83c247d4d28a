//! Python bindings for the `cicme` crate.
//!
//! Matrices cross the boundary as lists of rows and graphs as lists of
//! `(parent, child)` index pairs.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;

use cicme::engine::{self, Timings};
use cicme::metrics::{self, BinaryGraph};
use cicme::notears::{self, FitOptions, Init, ModelSet, SolverConfig, WeightedAdjacency};
use cicme::scm;
use cicme::stability::{self, ResidualSample};
use cicme::{CicmeConfig, CicmeError, Experiment, Method, MultiDomainDataset};

create_exception!(pycicme, PyCicmeError, PyException, "Numerical or structural failure inside cicme.");

fn to_py(e: CicmeError) -> PyErr {
    match e {
        CicmeError::Argument(_) | CicmeError::Structural(_) => PyValueError::new_err(e.to_string()),
        CicmeError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyCicmeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn graph(d: usize, edges: &[(usize, usize)]) -> PyResult<BinaryGraph> {
    BinaryGraph::from_edges(d, edges).map_err(to_py)
}

/// Samples from several domains over one set of variables.
#[pyclass(name = "Dataset", module = "pycicme")]
struct PyDataset {
    inner: MultiDomainDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (domains, variable_names=None))]
    fn new(domains: Vec<Vec<Vec<f64>>>, variable_names: Option<Vec<String>>) -> PyResult<Self> {
        let mats = domains.iter().map(|d| matrix(d)).collect::<PyResult<Vec<_>>>()?;
        let d = mats.first().map_or(0, |m| m.ncols());
        let names = variable_names.unwrap_or_else(|| (1..=d).map(|j| format!("X{j}")).collect());
        Ok(Self { inner: MultiDomainDataset::new(names, mats).map_err(to_py)? })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: MultiDomainDataset::read_dir(&dir).map_err(to_py)? })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write_dir(&dir).map_err(to_py)
    }

    #[getter]
    fn variable_names(&self) -> Vec<String> {
        self.inner.variable_names.clone()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn num_domains(&self) -> usize {
        self.inner.num_domains()
    }

    /// Per-domain sample matrices.
    #[getter]
    fn domains(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.domains.iter().map(rows).collect()
    }

    /// Pooled rows and their 1-based domain labels.
    fn pool(&self) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
        let (m, idx) = self.inner.pool().map_err(to_py)?;
        Ok((rows(&m), idx))
    }

    /// Ground-truth edge lists per domain, if the data was generated.
    fn truth_graphs(&self) -> PyResult<Option<Vec<Vec<(usize, usize)>>>> {
        let truth = self.inner.truth_graphs().map_err(to_py)?;
        Ok(truth.map(|gs| gs.iter().map(BinaryGraph::edges).collect()))
    }

    fn __repr__(&self) -> String {
        let sizes: Vec<usize> = self.inner.domains.iter().map(|m| m.nrows()).collect();
        format!("Dataset(d={}, domain_sizes={sizes:?})", self.inner.d())
    }
}

/// Method settings; every keyword defaults to the library default.
#[pyclass(name = "Config", module = "pycicme")]
struct PyConfig {
    inner: CicmeConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (*, seed=None, alpha=None, gamma=None, lambda1=None, lambda2=None, threshold=None, hidden_units=None, permutations=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: Option<u64>,
        alpha: Option<f64>,
        gamma: Option<f64>,
        lambda1: Option<f64>,
        lambda2: Option<f64>,
        threshold: Option<f64>,
        hidden_units: Option<usize>,
        permutations: Option<usize>,
    ) -> PyResult<Self> {
        let mut c = CicmeConfig::default();
        if let Some(v) = seed {
            c.seed = v;
        }
        if let Some(v) = alpha {
            c.alpha = v;
        }
        if let Some(v) = gamma {
            c.gamma = v;
        }
        if let Some(v) = lambda1 {
            c.model.lambda1 = v;
        }
        if let Some(v) = lambda2 {
            c.model.lambda2 = v;
        }
        if let Some(v) = threshold {
            c.threshold = v;
        }
        if let Some(v) = hidden_units {
            c.model.hidden_units = v;
        }
        if let Some(v) = permutations {
            c.test.permutations = v;
        }
        c.validate().map_err(to_py)?;
        Ok(Self { inner: c })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: CicmeConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold
    }
}

fn config_or_default(config: Option<PyRef<'_, PyConfig>>) -> CicmeConfig {
    config.map(|c| c.inner.clone()).unwrap_or_default()
}

/// Fitted NOTEARS-MLP model set.
#[pyclass(name = "FitResult", module = "pycicme")]
struct PyFitResult {
    models: ModelSet,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    h: f64,
    #[pyo3(get)]
    dual_steps: usize,
}

#[pymethods]
impl PyFitResult {
    /// Weighted adjacency `W[k][j]`, the strength of `k -> j`.
    fn adjacency(&self) -> Vec<Vec<f64>> {
        notears::extract_adjacency(&self.models).to_rows()
    }

    #[pyo3(signature = (tau=metrics::DEFAULT_THRESHOLD))]
    fn graph(&self, tau: f64) -> PyResult<Vec<(usize, usize)>> {
        Ok(metrics::threshold(&notears::extract_adjacency(&self.models), tau).map_err(to_py)?.edges())
    }

    /// Per-variable residuals `x_j - f_j(x)` on new data.
    fn residuals(&self, data: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        self.models.residuals(&matrix(&data)?).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.models.to_json().map_err(to_py)
    }
}

/// Outcome of one method on one dataset.
#[pyclass(name = "Result", module = "pycicme")]
struct PyRunResult {
    inner: engine::CicmeResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.name()
    }

    /// Thresholded edge list per domain.
    fn graphs(&self) -> PyResult<Vec<Vec<(usize, usize)>>> {
        Ok(self.inner.graphs().map_err(to_py)?.iter().map(BinaryGraph::edges).collect())
    }

    fn pooled_graph(&self) -> Option<Vec<(usize, usize)>> {
        self.inner.pooled.as_ref().map(|p| p.graph.edges())
    }

    #[getter]
    fn stable(&self) -> Option<Vec<bool>> {
        self.inner.stable()
    }

    #[getter]
    fn p_values(&self) -> Option<Vec<Option<f64>>> {
        self.inner.stability.as_ref().map(|s| s.p_values())
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged()
    }

    /// Wall-clock seconds of `step1`, `step2`, `step3` and `total`.
    #[getter]
    fn timings(&self) -> Vec<(&'static str, f64)> {
        let Timings { step1, step2, step3 } = self.inner.timings;
        vec![("step1", step1), ("step2", step2), ("step3", step3), ("total", self.inner.timings.total())]
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }
}

/// Outcome of the HSIC test of residuals against domain labels.
#[pyclass(name = "HsicResult", module = "pycicme", get_all)]
struct PyHsicResult {
    statistic: f64,
    p_value: f64,
    method: String,
    bandwidth: f64,
}

#[pyfunction]
#[pyo3(signature = (experiment, n, seed=0))]
fn make_experiment(experiment: &str, n: usize, seed: u64) -> PyResult<PyDataset> {
    let e: Experiment = experiment.parse().map_err(to_py)?;
    Ok(PyDataset { inner: scm::make_experiment(e, n, seed).map_err(to_py)? })
}

/// Fit one NOTEARS-MLP model set to a sample matrix.
#[pyfunction]
#[pyo3(signature = (data, config=None))]
fn fit(py: Python<'_>, data: Vec<Vec<f64>>, config: Option<PyRef<'_, PyConfig>>) -> PyResult<PyFitResult> {
    let x = matrix(&data)?;
    let cfg = config_or_default(config);
    let out = py
        .detach(|| notears::fit(&x, &cfg.model, &SolverConfig::default(), Init::Random(cfg.seed), &FitOptions::default()))
        .map_err(to_py)?;
    Ok(PyFitResult { converged: out.converged, h: out.h, dual_steps: out.dual_steps, models: out.models })
}

/// Run `cicme-f`, `cicme-l`, `notears-pool` or `notears-ind`.
#[pyfunction]
#[pyo3(signature = (dataset, method="cicme-f", config=None))]
fn run(py: Python<'_>, dataset: &PyDataset, method: &str, config: Option<PyRef<'_, PyConfig>>) -> PyResult<PyRunResult> {
    let m: Method = method.parse().map_err(to_py)?;
    let cfg = config_or_default(config);
    let ds = dataset.inner.clone();
    let inner = py.detach(|| engine::run(&ds, m, &cfg)).map_err(to_py)?;
    Ok(PyRunResult { inner })
}

/// HSIC independence test; `method` is `"gamma"` or `"permutation"`.
#[pyfunction]
#[pyo3(signature = (residuals, domains, method="gamma", permutations=1000, seed=0))]
fn hsic_test(
    residuals: Vec<f64>,
    domains: Vec<usize>,
    method: &str,
    permutations: usize,
    seed: u64,
) -> PyResult<PyHsicResult> {
    let z = ResidualSample::new(residuals, domains).map_err(to_py)?;
    match method {
        "gamma" => {
            let t = stability::gamma_pvalue(&z).map_err(to_py)?;
            Ok(PyHsicResult {
                statistic: t.statistic,
                p_value: t.p_value,
                method: format!("{:?}", t.method).to_lowercase(),
                bandwidth: t.bandwidth,
            })
        }
        "permutation" => Ok(PyHsicResult {
            statistic: stability::hsic_statistic(&z).map_err(to_py)?,
            p_value: stability::permutation_pvalue(&z, permutations, seed).map_err(to_py)?,
            method: "permutation".into(),
            bandwidth: stability::median_bandwidth(z.residuals()),
        }),
        other => Err(PyValueError::new_err(format!("unknown p-value method {other:?}"))),
    }
}

/// `tr(exp(W o W)) - d` for a non-negative weighted adjacency.
#[pyfunction]
fn acyclicity(adjacency: Vec<Vec<f64>>) -> PyResult<f64> {
    let w = WeightedAdjacency::new(matrix(&adjacency)?).map_err(to_py)?;
    Ok(notears::acyclicity(&w).map_err(to_py)?.value)
}

/// Edges whose weight strictly exceeds `tau`.
#[pyfunction]
#[pyo3(signature = (adjacency, tau=metrics::DEFAULT_THRESHOLD))]
fn threshold(adjacency: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<(usize, usize)>> {
    let w = WeightedAdjacency::new(matrix(&adjacency)?).map_err(to_py)?;
    Ok(metrics::threshold(&w, tau).map_err(to_py)?.edges())
}

#[pyfunction]
fn shd(d: usize, estimated: Vec<(usize, usize)>, truth: Vec<(usize, usize)>) -> PyResult<usize> {
    metrics::shd(&graph(d, &estimated)?, &graph(d, &truth)?).map_err(to_py)
}

#[pyfunction]
fn local_shd(d: usize, estimated: Vec<(usize, usize)>, truth: Vec<(usize, usize)>, variable: usize) -> PyResult<usize> {
    metrics::local_shd(&graph(d, &estimated)?, &graph(d, &truth)?, variable).map_err(to_py)
}

#[pymodule]
fn pycicme(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CicmeError", m.py().get_type::<PyCicmeError>())?;
    m.add("METHODS", Method::ALL.iter().map(|x| x.name()).collect::<Vec<_>>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PyHsicResult>()?;
    m.add_function(wrap_pyfunction!(make_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(hsic_test, m)?)?;
    m.add_function(wrap_pyfunction!(acyclicity, m)?)?;
    m.add_function(wrap_pyfunction!(threshold, m)?)?;
    m.add_function(wrap_pyfunction!(shd, m)?)?;
    m.add_function(wrap_pyfunction!(local_shd, m)?)?;
    Ok(())
}
