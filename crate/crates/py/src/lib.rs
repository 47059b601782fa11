//! Python module `dsva`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use dsva_core::club::{club_bench_row, ClubBenchConfig};
use dsva_core::decoupler::ortho_loss as ortho_op;
use dsva_core::diffcore::{Graph, Tensor};
use dsva_core::gradsuite::gradient_suite;
use dsva_core::harness::{self, threshold};
use dsva_core::losses::{ce_loss as ce_op, dice_loss as dice_op, CeVariant};
use dsva_core::synthdata::{self, FactorConfig, GenerationConfig};

fn err(e: dsva_core::Error) -> PyErr {
    match e {
        dsva_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Dense f64 tensor, row-major.
#[pyclass(name = "Tensor", module = "dsva", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: Tensor::new(shape, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn identity(n: usize) -> Self {
        PyTensor { inner: Tensor::identity(n) }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Generated scenes with their fused hidden states.
#[pyclass(name = "Dataset", module = "dsva")]
pub struct PyDataset {
    inner: synthdata::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (seed, count, height=64, width=64, objects=4))]
    fn generate(seed: u64, count: usize, height: usize, width: usize, objects: usize) -> PyResult<Self> {
        let gen = GenerationConfig {
            height,
            width,
            ..GenerationConfig::with_objects(objects)
        };
        let factors = FactorConfig {
            reference_scenes: FactorConfig::default().reference_scenes.min(count.max(1)),
            ..Default::default()
        };
        let (inner, _) = synthdata::generate_dataset(seed, count, &gen, &factors).map_err(err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: synthdata::Dataset::read(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyDataset {
            inner: synthdata::Dataset::from_bytes(data).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_bytes().map_err(err)?))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Scene `i` as a dict: image (HWC floats), label text, masks and factors.
    fn scene(&self, py: Python<'_>, i: usize) -> PyResult<Py<PyAny>> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("scene {i} of {}", self.inner.len())))?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("seed", s.scene.seed)?;
        d.set_item("image", s.scene.image.clone())?;
        d.set_item("label", s.scene.label_text())?;
        d.set_item("label_mask", s.scene.label_mask.clone())?;
        d.set_item("target_mask", s.scene.target_mask().to_vec())?;
        d.set_item("x_fused", s.state.x_fused.clone())?;
        d.set_item("e_text", s.state.e_text.clone())?;
        d.set_item("e_vis", s.state.e_vis.clone())?;
        Ok(d.into_any().unbind())
    }
}

/// Run configuration. `overrides` take `section.key=value`.
#[pyclass(name = "RunConfig", module = "dsva", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: harness::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: harness::RunConfig::load(path.as_deref(), &overrides).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (text, overrides=Vec::new()))]
    fn from_toml(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: harness::RunConfig::from_toml_str(text, &overrides).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, out_dir={:?})", self.inner.run.seed, self.inner.run.out_dir)
    }
}

#[pyfunction]
fn pretrain_text(py: Python<'_>, config: &PyRunConfig) -> PyResult<Py<PyAny>> {
    let cfg = config.inner.clone();
    let rec = py.detach(|| harness::run_phase1(&cfg)).map_err(err)?;
    to_py(py, &rec)
}

#[pyfunction]
fn train_decouple(py: Python<'_>, config: &PyRunConfig, init: PathBuf) -> PyResult<Py<PyAny>> {
    let cfg = config.inner.clone();
    let rec = py.detach(|| harness::run_phase2(&cfg, &init)).map_err(err)?;
    to_py(py, &rec)
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint, iterations=None))]
fn evaluate(py: Python<'_>, config: &PyRunConfig, checkpoint: PathBuf, iterations: Option<usize>) -> PyResult<Py<PyAny>> {
    let mut cfg = config.inner.clone();
    if let Some(t) = iterations {
        cfg.eval.iterations = t;
    }
    let report = py
        .detach(|| {
            let ds = harness::load_dataset(&cfg)?;
            harness::evaluate_checkpoint(&cfg, &ds, &checkpoint, None)
        })
        .map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (rho, samples=10_000, fit_steps=4000))]
fn club_bench(py: Python<'_>, rho: f64, samples: usize, fit_steps: usize) -> PyResult<Py<PyAny>> {
    let cfg = ClubBenchConfig {
        samples,
        fit_steps,
        ..Default::default()
    };
    let row = py.detach(|| club_bench_row(rho, &cfg)).map_err(err)?;
    to_py(py, &row)
}

/// `(name, passed, max_rel_err)` per gradient check.
#[pyfunction]
fn grad_check(py: Python<'_>) -> PyResult<Vec<(String, bool, f64)>> {
    let reports = py.detach(gradient_suite).map_err(err)?;
    Ok(reports.iter().map(|r| (r.name.clone(), r.passed, r.max_rel_err())).collect())
}

#[pyfunction]
#[pyo3(signature = (pred, target, eps=1e-6))]
fn dice_loss(pred: &PyTensor, target: &PyTensor, eps: f64) -> PyResult<f64> {
    let g = Graph::new();
    let (p, y) = (g.constant(&pred.inner).map_err(err)?, g.constant(&target.inner).map_err(err)?);
    Ok(g.scalar(dice_op(&g, p, y, eps).map_err(err)?))
}

/// `variant` is "bce" or "squared_error".
#[pyfunction]
#[pyo3(signature = (pred, target, variant="bce"))]
fn ce_loss(pred: &PyTensor, target: &PyTensor, variant: &str) -> PyResult<f64> {
    let v = match variant {
        "bce" => CeVariant::Bce,
        "squared_error" => CeVariant::PaperSquaredError,
        other => return Err(PyValueError::new_err(format!("unknown ce variant {other:?}"))),
    };
    let g = Graph::new();
    let (p, y) = (g.constant(&pred.inner).map_err(err)?, g.constant(&target.inner).map_err(err)?);
    Ok(g.scalar(ce_op(&g, p, y, v).map_err(err)?))
}

#[pyfunction]
fn ortho_loss(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    let g = Graph::new();
    let (x, y) = (g.constant(&a.inner).map_err(err)?, g.constant(&b.inner).map_err(err)?);
    Ok(g.scalar(ortho_op(&g, x, y).map_err(err)?))
}

/// Gradient of `sum(GRL(x))` with respect to `x`.
#[pyfunction]
fn gradient_reversal_grad(x: &PyTensor, lam: f64) -> PyResult<PyTensor> {
    let g = Graph::new();
    let v = g.variable(&x.inner).map_err(err)?;
    let l = g.sum(g.gradient_reversal(v, lam).map_err(err)?).map_err(err)?;
    let grads = g.backward(l).map_err(err)?;
    let gx = grads.wrt(v).ok_or_else(|| PyValueError::new_err("no gradient reached x"))?;
    PyTensor::new(x.inner.shape().to_vec(), gx.to_vec())
}

/// IoU of probabilities thresholded at 0.5 against a 0/1 mask.
#[pyfunction]
fn iou(prob: Vec<f64>, mask: Vec<u8>) -> PyResult<f64> {
    if prob.len() != mask.len() {
        return Err(PyValueError::new_err(format!("{} probabilities for {} pixels", prob.len(), mask.len())));
    }
    Ok(harness::iou(&threshold(&prob), &mask))
}

#[pymodule]
fn dsva(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(pretrain_text, m)?)?;
    m.add_function(wrap_pyfunction!(train_decouple, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(club_bench, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ortho_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_reversal_grad, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    Ok(())
}
