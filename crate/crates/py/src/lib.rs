//! Python bindings for the `mehtc` crate.
//!
//! Volumes cross the boundary as flat lists in `k, j, i` order together
//! with their `[i, j, k]` dims; configs and manifests as JSON strings.

use std::path::PathBuf;

use mehtc::cli::{execute, replay};
use mehtc::heartrecon::{make_synthetic_heart_on, ReconGrid};
use mehtc::infer::{argmax_labels, sliding_window_predict, InferenceConfig};
use mehtc::metrics::{dice_labels, hausdorff_labels, HdStatistic};
use mehtc::model::{Checkpoint, Model, ModelConfig};
use mehtc::tensor::Tensor;
use mehtc::volio::{read_volume, write_volume, Geometry, Loaded, Volume};
use mehtc::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Dice overlap of class `cls`; both masks empty scores 1.0.
#[pyfunction]
fn dice(pred: Vec<u16>, gt: Vec<u16>, cls: u16) -> PyResult<f64> {
    dice_labels(&pred, &gt, cls).map_err(py_err)
}

/// Hausdorff distance in mm between the surfaces of class `cls`.
/// `dims` and `spacing` are in `i, j, k` order; `percentile` is 95 or 100.
#[pyfunction]
#[pyo3(signature = (pred, gt, dims, cls, spacing, percentile = 100))]
fn hausdorff(pred: Vec<u16>, gt: Vec<u16>, dims: [usize; 3], cls: u16, spacing: [f64; 3], percentile: u32) -> PyResult<f64> {
    let stat = HdStatistic::from_percentile(percentile).map_err(py_err)?;
    hausdorff_labels(&pred, &gt, dims, cls, spacing, stat).map_err(py_err)
}

/// Patch origins along one axis for sliding-window inference.
#[pyfunction]
fn window_origins(extent: usize, patch: usize, step: f64) -> PyResult<Vec<usize>> {
    mehtc::infer::window_origins(extent, patch, step).map_err(py_err)
}

/// Normalized-temperature cross-entropy between two `[N, e]` embedding sets.
#[pyfunction]
fn contrastive_loss(z_a: Vec<Vec<f64>>, z_b: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let to_tensor = |rows: Vec<Vec<f64>>| -> PyResult<Tensor<f64>> {
        let e = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != e) {
            return Err(PyValueError::new_err("embedding rows differ in length"));
        }
        Tensor::new(vec![rows.len(), e], rows.concat()).map_err(py_err)
    };
    mehtc::ssl::contrastive_loss(&to_tensor(z_a)?, &to_tensor(z_b)?, tau).map_err(py_err)
}

/// A NIfTI-1 image or label volume.
#[pyclass(name = "Volume", skip_from_py_object)]
#[derive(Clone)]
struct PyVolume {
    #[pyo3(get)]
    dims: [usize; 3],
    #[pyo3(get)]
    spacing: [f64; 3],
    #[pyo3(get)]
    origin: [f64; 3],
    #[pyo3(get)]
    direction: [[f64; 3]; 3],
    #[pyo3(get)]
    data: Vec<f32>,
}

impl PyVolume {
    fn geometry(&self) -> Geometry {
        let mut g = Geometry::new(self.dims, self.spacing);
        g.origin = self.origin;
        g.direction = self.direction;
        g
    }
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (dims, data, spacing = [1.0, 1.0, 1.0], origin = [0.0, 0.0, 0.0]))]
    fn new(dims: [usize; 3], data: Vec<f32>, spacing: [f64; 3], origin: [f64; 3]) -> PyResult<Self> {
        let v = PyVolume { dims, spacing, origin, direction: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], data };
        Volume::new(v.geometry(), v.data.clone()).map_err(py_err)?;
        Ok(v)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let (g, data) = match read_volume(&path, None).map_err(py_err)? {
            Loaded::Image(v) => (v.geometry, v.data),
            Loaded::Labels(m) => (m.geometry, m.data.iter().map(|&l| l as f32).collect()),
        };
        Ok(PyVolume { dims: g.dims, spacing: g.spacing, origin: g.origin, direction: g.direction, data })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        let v = Volume::new(self.geometry(), self.data.clone()).map_err(py_err)?;
        write_volume(&v, &path).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, spacing={:?})", self.dims, self.spacing)
    }
}

/// A trained segmentation network loaded from a checkpoint.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    model: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let model = Checkpoint::load(&path).and_then(|c| c.model("")).map_err(py_err)?;
        Ok(PyModel { model })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    /// Sliding-window label prediction for a single-channel array with
    /// spatial shape `shape` (`[H, W]` or `[D, H, W]`).
    #[pyo3(signature = (data, shape, patch, step = 0.5))]
    fn predict(&self, data: Vec<f32>, shape: Vec<usize>, patch: Vec<usize>, step: f64) -> PyResult<Vec<u16>> {
        let mut full = vec![1];
        full.extend_from_slice(&shape);
        let x = Tensor::new(full, data).map_err(py_err)?;
        let cfg = InferenceConfig { patch, step, postprocess: vec![] };
        let probs = sliding_window_predict(&self.model, &x, &cfg).map_err(py_err)?;
        argmax_labels(&probs).map_err(py_err)
    }
}

/// Synthetic whole-heart label map on a `size³` grid spanning `box_mm`.
#[pyfunction]
#[pyo3(signature = (seed, size = 160, box_mm = 160.0))]
fn synthetic_heart(seed: u64, size: usize, box_mm: f64) -> PyResult<PyVolume> {
    let m = make_synthetic_heart_on(seed, &ReconGrid { size, box_mm }).map_err(py_err)?;
    let g = m.geometry;
    Ok(PyVolume { dims: g.dims, spacing: g.spacing, origin: g.origin, direction: g.direction, data: m.data.iter().map(|&l| l as f32).collect() })
}

/// JSON for a windowed cross-attention network, for use in run configs.
#[pyfunction]
#[pyo3(signature = (dims, in_channels, num_classes, widths, window = 4, heads = 1))]
fn model_config(dims: usize, in_channels: usize, num_classes: usize, widths: Vec<usize>, window: usize, heads: usize) -> PyResult<String> {
    let cfg = ModelConfig::mehtc(dims, in_channels, num_classes, widths, window, heads);
    serde_json::to_string(&cfg).map_err(|e| py_err(e.into()))
}

/// Runs a CLI command with a JSON config and returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (command, config, out, threads = 1))]
fn run(py: Python<'_>, command: &str, config: &str, out: PathBuf, threads: usize) -> PyResult<String> {
    let value: serde_json::Value = serde_json::from_str(config).map_err(|e| py_err(e.into()))?;
    let manifest = py.detach(|| execute(command, value, &out, threads)).map_err(py_err)?;
    serde_json::to_string(&manifest).map_err(|e| py_err(e.into()))
}

/// Re-runs a manifest and raises if any output checksum differs.
#[pyfunction]
#[pyo3(signature = (manifest, out, threads = 1))]
fn replay_manifest(py: Python<'_>, manifest: PathBuf, out: PathBuf, threads: usize) -> PyResult<String> {
    let m = py.detach(|| replay(&manifest, Some(out), threads)).map_err(py_err)?;
    serde_json::to_string(&m).map_err(|e| py_err(e.into()))
}

#[pymodule]
fn pymehtc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(window_origins, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_heart, m)?)?;
    m.add_function(wrap_pyfunction!(model_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(replay_manifest, m)?)?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
