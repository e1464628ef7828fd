use std::path::PathBuf;

use kamoe::data::moving_median_normalize;
use kamoe::experiment::{prepare_data, run_once, ExperimentConfig};
use kamoe::model::ArchNode;
use kamoe::{Error, GridConfig, ModelKind, ModelSpec, Network, SplineGrid, Tensor, Variant};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        Error::Divergence { .. } => PyArithmeticError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(name: &str, value: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {name}: {value}")))
}

fn tensor_from(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

fn tensor_from_windows(windows: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor> {
    let (n, s) = (windows.len(), windows.first().map_or(0, Vec::len));
    let q = windows.first().and_then(|w| w.first()).map_or(0, Vec::len);
    let data: Vec<f64> = windows.into_iter().flatten().flatten().collect();
    Tensor::new(vec![n, s, q], data).map_err(to_py)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let width = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(width).map(<[f64]>::to_vec).collect()
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A tabular or recurrent network with an optional mixture-of-experts layer.
#[pyclass(name = "Model", module = "kamoe_rs")]
struct PyModel {
    net: Network,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (kind, variant, input_dim, hidden, layers=1, experts=3, output_dim=1, seq_len=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        kind: &str,
        variant: &str,
        input_dim: usize,
        hidden: usize,
        layers: usize,
        experts: usize,
        output_dim: usize,
        seq_len: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = ModelSpec {
            kind: parse::<ModelKind>("kind", kind)?,
            variant: parse::<Variant>("variant", variant)?,
            input_dim,
            seq_len,
            hidden,
            layers,
            experts,
            output_dim,
            grid: GridConfig::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(PyModel {
            net: Network::new(spec, &mut rng).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (net, _) = Network::load(&path).map_err(to_py)?;
        Ok(PyModel { net })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.net.save(&path, serde_json::Value::Null).map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.net.parameters().iter().map(|p| p.value().len()).sum()
    }

    #[getter]
    fn spec<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(self.net.spec()).map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_to_py(py, &text)
    }

    fn architecture(&self) -> String {
        self.net.architecture().render()
    }

    /// Rows of features for tabular models.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = self.net.predict(&tensor_from(x)?, 4096).map_err(to_py)?;
        Ok(rows_of(&out))
    }

    /// Windows shaped (samples, steps, channels) for recurrent models.
    fn predict_sequences(&self, x: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let out = self.net.predict(&tensor_from_windows(x)?, 4096).map_err(to_py)?;
        Ok(rows_of(&out))
    }

    /// Per-sample gate weights of the first mixture layer.
    fn gate_weights(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (_, gates) = self.net.predict_with_gates(&tensor_from(x)?, 4096).map_err(to_py)?;
        let gates = gates.ok_or_else(|| PyValueError::new_err("the model has no mixture layer"))?;
        Ok(rows_of(&gates))
    }

    /// Paths where the two architectures differ.
    fn structural_diff(&self, other: &PyModel) -> Vec<String> {
        let (a, b): (ArchNode, ArchNode) = (self.net.architecture(), other.net.architecture());
        kamoe::model::structural_diff(&a, &b)
    }

    fn __repr__(&self) -> String {
        let s = self.net.spec();
        format!(
            "Model(kind={}, variant={}, hidden={}, layers={}, parameters={})",
            s.kind,
            s.variant,
            s.hidden,
            s.layers,
            self.parameter_count()
        )
    }
}

/// B-spline basis values at each point, one row per point.
#[pyfunction]
#[pyo3(signature = (x, grid_size=5, spline_order=3, lo=-1.0, hi=1.0))]
fn bspline_basis(x: Vec<f64>, grid_size: i64, spline_order: i64, lo: f64, hi: f64) -> PyResult<Vec<Vec<f64>>> {
    let grid = SplineGrid::from_signed(grid_size, spline_order, lo, hi).map_err(to_py)?;
    Ok(x.iter().map(|&v| grid.basis(v)).collect())
}

#[pyfunction]
fn median_normalize(series: Vec<f64>, window: usize) -> PyResult<Vec<f64>> {
    moving_median_normalize(&series, window).map_err(to_py)
}

/// Trains one model from a JSON experiment config; returns its test metrics.
#[pyfunction]
fn train<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    let metrics = py
        .detach(|| prepare_data(&cfg).and_then(|d| run_once(&cfg, &d)))
        .map_err(to_py)?
        .1;
    json_to_py(py, &serde_json::to_string(&metrics).map_err(|e| PyValueError::new_err(e.to_string()))?)
}

#[pymodule]
fn kamoe_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(bspline_basis, m)?)?;
    m.add_function(wrap_pyfunction!(median_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
