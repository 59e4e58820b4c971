//! Python module `genlayer`.
//!
//! Vectors and matrices cross the boundary as lists and nested lists; reports
//! come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use genlayer::bregman::{BregmanLoss, LossKind};
use genlayer::data::{gen_regression, TargetFn};
use genlayer::experiments::presets::{self, Scale};
use genlayer::experiments::{ExperimentSpec, ModelSpec, BUILD_ID};
use genlayer::geometry;
use genlayer::network::{load_checkpoint, save_checkpoint, Activation, InitScheme, LayerSpec, Network};
use genlayer::{Error, Matrix};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::BoundChain { .. } | Error::Diverged { .. } | Error::NonFinite(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {s:?}")))
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(py_err)
}

#[pyclass(name = "Network", module = "genlayer")]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    /// Fully connected net with the given hidden widths.
    #[staticmethod]
    #[pyo3(signature = (input, hidden, output, activation = "relu", init = "he", seed = 0, bias = true))]
    fn mlp(
        input: usize,
        hidden: Vec<usize>,
        output: usize,
        activation: &str,
        init: &str,
        seed: u64,
        bias: bool,
    ) -> PyResult<Self> {
        let act: Activation = parse_enum("activation", activation)?;
        let scheme: InitScheme = parse_enum("init scheme", init)?;
        let mut dims = vec![input];
        dims.extend(&hidden);
        dims.push(output);
        let n = dims.len() - 1;
        let specs = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let a = if l + 1 == n { Activation::Identity } else { act };
                LayerSpec::Dense {
                    input: w[0],
                    output: w[1],
                    activation: a,
                    bias,
                }
            })
            .collect();
        let inner = Network::init(specs, seed, scheme).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Builds from a model config, the `model` object of an experiment file.
    #[staticmethod]
    fn from_model_json(text: &str) -> PyResult<Self> {
        let spec: ModelSpec = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: spec.build().map_err(py_err)?,
        })
    }

    /// Bias-free dense stack; `weights[l]` is `out × in`.
    #[staticmethod]
    fn from_dense_weights(weights: Vec<Vec<Vec<f64>>>, activations: Vec<String>) -> PyResult<Self> {
        let ws = weights.iter().map(|w| matrix(w)).collect::<PyResult<Vec<_>>>()?;
        let acts = activations
            .iter()
            .map(|a| parse_enum::<Activation>("activation", a))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: Network::from_dense_weights(ws, &acts).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(py_err)?.network,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, json!({"source": "python"})).map_err(py_err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn sigma_product(&self) -> f64 {
        geometry::spectral_summary(&self.inner).sigma_product
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict_one(&x).map_err(py_err)
    }

    fn predict_batch(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.predict(&matrix(&xs)?).map_err(py_err)?))
    }

    /// `out × in` Jacobian at `x`.
    fn input_jacobian(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.input_jacobian(&x).map_err(py_err)?))
    }

    fn spectral_summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &geometry::spectral_summary(&self.inner))
    }

    fn weights(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.linears().iter().map(|l| rows(&l.weight)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(input={}, output={}, layers={}, params={})",
            self.inner.input_dim(),
            self.inner.output_dim(),
            self.inner.specs().len(),
            self.inner.num_params()
        )
    }
}

#[pyclass(name = "Loss", module = "genlayer")]
struct PyLoss {
    inner: BregmanLoss,
}

#[pymethods]
impl PyLoss {
    /// `kind` is `squared`, `softmax_ce` or `bernoulli`.
    #[new]
    #[pyo3(signature = (kind, output_dim = 1))]
    fn new(kind: &str, output_dim: usize) -> PyResult<Self> {
        let k: LossKind = kind.parse().map_err(py_err)?;
        Ok(Self {
            inner: BregmanLoss::from_kind(k, output_dim),
        })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    fn value(&self, z: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.inner.value(&z, &y).map_err(py_err)
    }

    fn grad_z(&self, z: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.grad_z(&z, &y).map_err(py_err)
    }

    fn mean(&self, theta: Vec<f64>) -> Vec<f64> {
        self.inner.mean(&theta)
    }

    fn hessian_psi(&self, theta: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.hessian_psi(&theta).map_err(py_err)?))
    }

    fn conjugacy_check(&self, y: Vec<f64>) -> PyResult<f64> {
        self.inner.conjugacy_check(&y).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Loss({:?})", self.inner)
    }
}

/// Per-datum metric `ζ(x)` with its eigenvalue bounds.
#[pyfunction]
fn pulled_back_metric<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    loss: &PyLoss,
    x: Vec<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let m = geometry::pulled_back_metric(&net.inner, &loss.inner, &x).map_err(py_err)?;
    to_py(
        py,
        &json!({
            "output": m.output,
            "zeta": rows(&m.zeta),
            "sigma_max": m.sigma_max,
            "sigma_psi": m.sigma_psi,
            "layer_sigmas": m.layer_sigmas,
            "sigma_product": m.sigma_product,
            "trace_bound": m.trace_bound,
            "spectral_bound": m.spectral_bound,
            "c": m.c,
            "ln_trace_bound": m.ln_trace_bound,
            "ln_spectral_bound": m.ln_spectral_bound,
        }),
    )
}

/// Bound chain at every point; violations are recorded, not raised.
#[pyfunction]
fn analyze_bounds<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    loss: &PyLoss,
    xs: Vec<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &geometry::analyze_bounds(&net.inner, &loss.inner, &xs).map_err(py_err)?)
}

/// Like `analyze_bounds` but raises `RuntimeError` on the first violation.
#[pyfunction]
fn verify_bound_chain<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    loss: &PyLoss,
    xs: Vec<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &geometry::verify_bound_chain(&net.inner, &loss.inner, &xs).map_err(py_err)?)
}

/// `in × out` path-product matrix plus path statistics.
#[pyfunction]
fn path_product_matrix<'py>(py: Python<'py>, net: &PyNetwork, x: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let r = geometry::path_product_matrix(&net.inner, &x).map_err(py_err)?;
    to_py(
        py,
        &json!({
            "p_matrix": rows(&r.p_matrix),
            "num_paths": r.num_paths,
            "max_abs_path_product": r.max_abs_path_product,
        }),
    )
}

#[pyfunction]
fn rescaling_invariance_check<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    layer: usize,
    beta: f64,
    loss: &PyLoss,
    xs: Vec<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let r = geometry::rescaling_invariance_check(&net.inner, layer, beta, &loss.inner, &xs).map_err(py_err)?;
    to_py(py, &r)
}

/// Noisy regression samples `(xs, ys)` on a uniform grid.
#[pyfunction]
#[pyo3(signature = (function, n = 100, lo = -8.0, hi = 8.0, sigma = 10.0, seed = 0))]
fn gen_data(function: &str, n: usize, lo: f64, hi: f64, sigma: f64, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let f: TargetFn = parse_enum("target function", function)?;
    let ds = gen_regression(f, n, lo, hi, sigma, seed).map_err(py_err)?;
    Ok((ds.inputs.data().to_vec(), ds.targets.data().to_vec()))
}

/// A built-in experiment config as JSON text.
#[pyfunction]
#[pyo3(signature = (name, scale = "desk"))]
fn preset(name: &str, scale: &str) -> PyResult<String> {
    let s: Scale = scale.parse().map_err(py_err)?;
    presets::by_name(name, s)
        .map(|spec| spec.to_json())
        .ok_or_else(|| PyValueError::new_err(format!("unknown preset {name:?}")))
}

/// Validates and runs an experiment config; writes reports when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None, seed = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config: &str,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = ExperimentSpec::from_json(config).map_err(py_err)?;
    if let Some(s) = seed {
        spec.override_seed(s);
    }
    spec.validate().map_err(py_err)?;
    let report = match out_dir {
        Some(dir) => spec.run(&dir),
        None => spec.run_in_memory(),
    }
    .map_err(py_err)?;
    to_py(py, &report)
}

#[pymodule]
#[pyo3(name = "genlayer")]
fn genlayer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", BUILD_ID)?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyLoss>()?;
    m.add_function(wrap_pyfunction!(pulled_back_metric, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(verify_bound_chain, m)?)?;
    m.add_function(wrap_pyfunction!(path_product_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(rescaling_invariance_check, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
