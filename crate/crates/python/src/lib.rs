//! Python bindings: synthetic data, the aggregation primitives, model
//! prediction with heatmaps, and the train/evaluate harness.

use std::path::PathBuf;

use emil::guidance::Mask;
use emil::harness::{self, Checkpoint, RunConfig};
use emil::head::{self, build_heatmaps};
use emil::synth::{self, SynthConfig};
use emil::{Emil, Error, ModelConfig, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) | Error::Format { .. }) => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn rows<T: Copy>(data: &[T], width: usize) -> Vec<Vec<T>> {
    data.chunks(width).map(<[T]>::to_vec).collect()
}

fn image_from_rows(image: Vec<Vec<f32>>) -> PyResult<Tensor<f32>> {
    let h = image.len();
    let w = image.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || image.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty rectangular list of rows"));
    }
    Tensor::new(&[1, h, w], image.into_iter().flatten().collect()).map_err(to_py)
}

fn config_from(text: Option<&str>) -> PyResult<RunConfig> {
    match text {
        Some(t) => RunConfig::parse_str(t).map_err(to_py),
        None => Ok(RunConfig::default()),
    }
}

/// One synthetic image with its label, lesion mask and group rectangles.
#[pyclass(name = "Sample", module = "emil_py", frozen)]
struct PySample {
    inner: synth::Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn label(&self) -> u8 {
        self.inner.label
    }

    /// Image rows, values in [-1, 1].
    #[getter]
    fn image(&self) -> Vec<Vec<f32>> {
        rows(self.inner.image.data(), self.inner.mask.width)
    }

    #[getter]
    fn mask(&self) -> Vec<Vec<u8>> {
        rows(&self.inner.mask.data, self.inner.mask.width)
    }

    /// `[(x0, y0, x1, y1, label), ...]` with exclusive upper bounds.
    #[getter]
    fn groups(&self) -> Vec<(usize, usize, usize, usize, u8)> {
        self.inner
            .groups
            .iter()
            .map(|g| (g.rect.x0, g.rect.y0, g.rect.x1, g.rect.y1, g.label))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample(label={}, lesion_pixels={}, size={}x{})",
            self.inner.label,
            self.inner.mask.area(),
            self.inner.mask.height,
            self.inner.mask.width
        )
    }
}

/// Generates `n` samples; `config` is `synth.*` / `data.*` config text.
#[pyfunction]
#[pyo3(signature = (n, seed=0, config=None))]
fn generate(n: usize, seed: u64, config: Option<&str>) -> PyResult<Vec<PySample>> {
    let cfg = config_from(config)?;
    Ok(synth::generate(&cfg.synth, n, seed)
        .map_err(to_py)?
        .into_iter()
        .map(|inner| PySample { inner })
        .collect())
}

#[pyfunction]
fn write_dataset(samples: Vec<PyRef<'_, PySample>>, path: PathBuf) -> PyResult<()> {
    let s: Vec<synth::Sample> = samples.iter().map(|p| p.inner.clone()).collect();
    synth::write_dataset(&s, path).map_err(to_py)
}

#[pyfunction]
fn read_dataset(path: PathBuf) -> PyResult<Vec<PySample>> {
    Ok(synth::read_dataset(path)
        .map_err(to_py)?
        .into_iter()
        .map(|inner| PySample { inner })
        .collect())
}

/// `Σ w·ỹ / max(Σ w, k_min)`.
#[pyfunction]
#[pyo3(signature = (y_tilde, w, k_min=1.0))]
fn aggregate(y_tilde: Vec<f64>, w: Vec<f64>, k_min: f64) -> PyResult<f64> {
    head::aggregate(&y_tilde, &w, k_min).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (y_tilde, w, indices, k_min=1.0))]
fn group_probability(y_tilde: Vec<f64>, w: Vec<f64>, indices: Vec<usize>, k_min: f64) -> PyResult<f64> {
    head::group_probability(&y_tilde, &w, &indices, k_min).map_err(to_py)
}

/// Exact change of the prediction when patch `i` is removed.
#[pyfunction]
#[pyo3(signature = (y_tilde, w, i, k_min=1.0))]
fn removal_delta(y_tilde: Vec<f64>, w: Vec<f64>, i: usize, k_min: f64) -> PyResult<f64> {
    head::removal_delta(&y_tilde, &w, i, k_min).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (scores, labels, threshold=0.5))]
fn classification_metrics<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<u8>,
    threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let r = harness::classification_metrics(&scores, &labels, threshold).map_err(to_py)?;
    json_to_py(py, &r)
}

#[pyclass(name = "Prediction", module = "emil_py", frozen)]
struct PyPrediction {
    inner: head::Prediction,
    kernel: (usize, usize),
    stride: (usize, usize),
    feature_dims: (usize, usize),
    input_dims: (usize, usize),
}

#[pymethods]
impl PyPrediction {
    #[getter]
    fn y_hat(&self) -> f64 {
        self.inner.y_hat
    }

    #[getter]
    fn y_tilde(&self) -> Vec<f64> {
        self.inner.y_tilde.clone()
    }

    #[getter]
    fn w(&self) -> Vec<f64> {
        self.inner.w.clone()
    }

    /// `(rows, cols)` of the patch grid.
    #[getter]
    fn grid(&self) -> (usize, usize) {
        self.inner.grid
    }

    #[getter]
    fn k_min(&self) -> f64 {
        self.inner.k_min
    }

    fn attention_mass(&self) -> f64 {
        self.inner.attention_mass()
    }

    fn group_probability(&self, indices: Vec<usize>) -> PyResult<f64> {
        self.inner.group_probability(&indices).map_err(to_py)
    }

    fn removal_delta(&self, i: usize) -> PyResult<f64> {
        self.inner.removal_delta(i).map_err(to_py)
    }

    fn with_k_min(&self, k_min: f64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_k_min(k_min).map_err(to_py)?,
            ..*self
        })
    }

    /// `(prob_rows, attention_rows)` rendered at input resolution.
    fn heatmaps(&self) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (p, a) = build_heatmaps(&self.inner, self.kernel, self.stride, self.feature_dims, self.input_dims)
            .map_err(to_py)?;
        Ok((rows(&p.render, self.input_dims.1), rows(&a.render, self.input_dims.1)))
    }

    /// Writes `<prefix>.prob.pgm` and `<prefix>.attn.pgm`.
    fn write_heatmaps(&self, prefix: String) -> PyResult<()> {
        let (p, a) = build_heatmaps(&self.inner, self.kernel, self.stride, self.feature_dims, self.input_dims)
            .map_err(to_py)?;
        p.write_pgm(format!("{prefix}.prob.pgm")).map_err(to_py)?;
        a.write_pgm(format!("{prefix}.attn.pgm")).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Prediction(y_hat={:.4}, grid={:?}, attention_mass={:.4})",
            self.inner.y_hat,
            self.inner.grid,
            self.inner.attention_mass()
        )
    }
}

/// An EMIL model with `f32` parameters.
#[pyclass(name = "Model", module = "emil_py", frozen)]
struct PyModel {
    inner: Emil<f32>,
}

#[pymethods]
impl PyModel {
    /// Fresh model; `config` is config-file text (`encoder.*`, `head.*`).
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = config_from(config)?;
        Ok(Self {
            inner: Emil::init(cfg.model, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(to_py)?.model,
        })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn k_min(&self) -> f64 {
        self.inner.config.head.k_min
    }

    /// Predicts one single-channel image given as rows.
    fn predict(&self, py: Python<'_>, image: Vec<Vec<f32>>) -> PyResult<PyPrediction> {
        let t = image_from_rows(image)?;
        let input = (t.shape()[1], t.shape()[2]);
        let model = &self.inner;
        let (inner, feature_dims) = py
            .detach(|| -> emil::Result<_> {
                let (feature_dims, _) = model.config.layout(input)?;
                Ok((model.predict(&t)?, feature_dims))
            })
            .map_err(to_py)?;
        let head_cfg = &model.config.head;
        Ok(PyPrediction {
            inner,
            kernel: head_cfg.kernel,
            stride: head_cfg.stride,
            feature_dims,
            input_dims: input,
        })
    }

    fn predict_sample(&self, py: Python<'_>, sample: PyRef<'_, PySample>) -> PyResult<PyPrediction> {
        let image = rows(sample.inner.image.data(), sample.inner.mask.width);
        self.predict(py, image)
    }

    fn __repr__(&self) -> String {
        let c: &ModelConfig = &self.inner.config;
        format!(
            "Model(channels={:?}, kernel={:?}, stride={:?}, k_min={}, parameters={})",
            c.encoder.stage_channels,
            c.head.kernel,
            c.head.stride,
            c.head.k_min,
            self.inner.num_parameters()
        )
    }
}

/// Trains per `config` text, writes a checkpoint to `out` and returns the
/// test metrics with the epoch log.
#[pyfunction]
#[pyo3(signature = (out, config=None))]
fn train<'py>(py: Python<'py>, out: PathBuf, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from(config)?;
    let result = py
        .detach(|| -> emil::Result<_> {
            cfg.validate()?;
            let samples = harness::load_samples(&cfg)?;
            let split = harness::split_samples(&cfg, &samples)?;
            let r = harness::run(&cfg, &samples, &split, &mut |_| {})?;
            Checkpoint {
                config: cfg.clone(),
                best_epoch: r.outcome.best_epoch,
                best_val_balanced_accuracy: r.outcome.best_val_balanced_accuracy,
                model: r.outcome.model.clone(),
            }
            .save(&out)?;
            Ok(r)
        })
        .map_err(to_py)?;
    json_to_py(
        py,
        &serde_json::json!({
            "best_epoch": result.outcome.best_epoch,
            "log": result.outcome.log,
            "test": result.test,
        }),
    )
}

/// Evaluates a checkpoint on its own data source; `split` is train, val,
/// test or all.
#[pyfunction]
#[pyo3(signature = (checkpoint, split="test"))]
fn evaluate<'py>(py: Python<'py>, checkpoint: PathBuf, split: &str) -> PyResult<Bound<'py, PyAny>> {
    let split = split.to_owned();
    let report = py
        .detach(|| -> emil::Result<_> {
            let ck = Checkpoint::load(&checkpoint)?;
            let samples = harness::load_samples(&ck.config)?;
            let parts = harness::split_samples(&ck.config, &samples)?;
            let idx = match split.as_str() {
                "train" => parts.train,
                "val" => parts.val,
                "test" => parts.test,
                "all" => (0..samples.len()).collect(),
                other => return Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
            };
            Ok(harness::evaluate(&ck.model, &samples, &idx)?.0)
        })
        .map_err(to_py)?;
    json_to_py(py, &report)
}

/// Binary mask check helper: patch labels for a mask given as rows.
#[pyfunction]
#[pyo3(signature = (mask, feature_dims, kernel=(1, 1), stride=(1, 1)))]
fn patch_labels(
    mask: Vec<Vec<u8>>,
    feature_dims: (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
) -> PyResult<Vec<u8>> {
    let h = mask.len();
    let w = mask.first().map_or(0, Vec::len);
    let m = Mask::new(h, w, mask.into_iter().flatten().collect()).map_err(to_py)?;
    emil::guidance::patch_labels(&m, feature_dims, kernel, stride).map_err(to_py)
}

#[pymodule]
fn emil_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyPrediction>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(group_probability, m)?)?;
    m.add_function(wrap_pyfunction!(removal_delta, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(patch_labels, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("DEFAULT_SYNTH_HEIGHT", SynthConfig::default().height)?;
    m.add("DEFAULT_SYNTH_WIDTH", SynthConfig::default().width)?;
    Ok(())
}
