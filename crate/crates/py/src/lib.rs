//! Python bindings. Images and label maps cross the boundary as flat
//! row-major lists plus their height and width.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ucell_core::checkpoint::Checkpoint;
use ucell_core::flowfield::{self, FlowTarget, PostprocessConfig};
use ucell_core::grid::{Image, InstanceMap};
use ucell_core::metrics;
use ucell_core::model::{self as core_model, ModelParams};
use ucell_core::synth::{self, SynthConfig};

fn err(e: ucell_core::Error) -> PyErr {
    use ucell_core::Error as E;
    match e {
        E::Io { .. } | E::Image { .. } | E::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn labels(data: Vec<u32>, height: usize, width: usize) -> PyResult<InstanceMap> {
    InstanceMap::from_vec(height, width, data).map_err(err)
}

#[pyclass(name = "ModelConfig", module = "ucell", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    pub inner: core_model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (d=64, stride=4, input_size=64, n_recursions=21, side_tokens=64, n_heads=1, n_datasets=1, channels=2))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        d: usize,
        stride: usize,
        input_size: usize,
        n_recursions: usize,
        side_tokens: usize,
        n_heads: usize,
        n_datasets: usize,
        channels: usize,
    ) -> PyResult<Self> {
        let inner = core_model::ModelConfig {
            d,
            stride,
            input_size,
            n_recursions,
            side_tokens,
            n_heads,
            n_datasets,
            channels,
            ..Default::default()
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// The full-size configuration at width `d`.
    #[staticmethod]
    fn paper(d: usize) -> Self {
        Self { inner: core_model::ModelConfig::paper(d) }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: core_model::ModelConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size
    }

    #[getter]
    fn n_recursions(&self) -> usize {
        self.inner.n_recursions
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    fn count_params(&self) -> usize {
        core_model::count_params(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.to_json())
    }
}

/// Model weights with their configuration.
#[pyclass(name = "Model", module = "ucell")]
pub struct PyModel {
    pub config: core_model::ModelConfig,
    pub params: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Randomly initialized weights.
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config.inner, &mut rng).map_err(err)?;
        Ok(Self { config: config.inner.clone(), params })
    }

    /// Loads a checkpoint, preferring EMA weights.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self { params: ck.inference_params(), config: ck.model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(self.config.clone(), self.params.clone()).save(&path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig { inner: self.config.clone() }
    }

    fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Runs all recursions on an `input_size` square image with
    /// `config.channels` interleaved channels. Returns a dict with `flow`
    /// (interleaved dy, dx), `fg`, `entropy` and `intercepted`.
    #[pyo3(signature = (image, dataset_id=0, intercept=Vec::new()))]
    fn forward<'py>(
        &self,
        py: Python<'py>,
        image: Vec<f64>,
        dataset_id: usize,
        intercept: Vec<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let n = self.config.input_size;
        let img = Image::from_vec(n, n, self.config.channels, image).map_err(err)?;
        let out = core_model::forward(&img, dataset_id, &self.params, &self.config, &intercept).map_err(err)?;
        let dict = flow_dict(py, &out.prediction)?;
        dict.set_item("entropy", out.entropy)?;
        let inter = PyDict::new(py);
        for (k, f) in &out.intercepted {
            inter.set_item(*k, flow_dict(py, f)?)?;
        }
        dict.set_item("intercepted", inter)?;
        Ok(dict)
    }

    /// Forward pass followed by post-processing into a label map.
    #[pyo3(signature = (image, dataset_id=0, min_cell_area=15))]
    fn segment(&self, image: Vec<f64>, dataset_id: usize, min_cell_area: usize) -> PyResult<Vec<u32>> {
        let n = self.config.input_size;
        let img = Image::from_vec(n, n, self.config.channels, image).map_err(err)?;
        let out = core_model::forward(&img, dataset_id, &self.params, &self.config, &[]).map_err(err)?;
        let post = PostprocessConfig { min_cell_area, ..Default::default() };
        Ok(flowfield::flow_to_labels(&out.prediction, &post).data)
    }
}

fn flow_dict<'py>(py: Python<'py>, f: &FlowTarget) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("height", f.height)?;
    d.set_item("width", f.width)?;
    d.set_item("flow", f.flow.clone())?;
    d.set_item("fg", f.fg.clone())?;
    Ok(d)
}

/// Parameter count of a configuration without allocating weights.
#[pyfunction]
fn count_params(config: &PyModelConfig) -> usize {
    core_model::count_params(&config.inner)
}

/// Gradient-field target of a label map: `(flow, fg)`.
#[pyfunction]
fn labels_to_flow(labels_flat: Vec<u32>, height: usize, width: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let f = flowfield::labels_to_flow(&labels(labels_flat, height, width)?);
    Ok((f.flow, f.fg))
}

/// Recovers a label map from a field.
#[pyfunction]
#[pyo3(signature = (flow, fg, height, width, min_cell_area=15, steps=200, fg_threshold=0.5))]
#[allow(clippy::too_many_arguments)]
fn flow_to_labels(
    flow: Vec<f64>,
    fg: Vec<f64>,
    height: usize,
    width: usize,
    min_cell_area: usize,
    steps: usize,
    fg_threshold: f64,
) -> PyResult<Vec<u32>> {
    if flow.len() != 2 * height * width || fg.len() != height * width {
        return Err(PyValueError::new_err("flow must hold 2·H·W values and fg H·W"));
    }
    let post = PostprocessConfig { min_cell_area, steps, fg_threshold, ..Default::default() };
    post.validate().map_err(err)?;
    let field = FlowTarget { height, width, flow, fg };
    Ok(flowfield::flow_to_labels(&field, &post).data)
}

/// Precision, recall, F1 and Dice of one prediction.
#[pyfunction]
#[pyo3(signature = (pred, gt, height, width, iou_threshold=0.5))]
fn score<'py>(
    py: Python<'py>,
    pred: Vec<u32>,
    gt: Vec<u32>,
    height: usize,
    width: usize,
    iou_threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::score(&labels(pred, height, width)?, &labels(gt, height, width)?, iou_threshold).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("f1", r.f1)?;
    d.set_item("dice", r.dice)?;
    d.set_item("n_pred", r.n_pred)?;
    d.set_item("n_gt", r.n_gt)?;
    Ok(d)
}

/// One-to-one matching: list of `(pred_id, gt_id, iou)`.
#[pyfunction]
#[pyo3(signature = (pred, gt, height, width, iou_threshold=0.5))]
fn match_instances(
    pred: Vec<u32>,
    gt: Vec<u32>,
    height: usize,
    width: usize,
    iou_threshold: f64,
) -> PyResult<Vec<(u32, u32, f64)>> {
    let m = metrics::match_instances(&labels(pred, height, width)?, &labels(gt, height, width)?, iou_threshold)
        .map_err(err)?;
    Ok(m.pairs.iter().map(|p| (p.pred_id, p.gt_id, p.iou)).collect())
}

#[pyfunction]
fn instance_dice(pred: Vec<u32>, gt: Vec<u32>, height: usize, width: usize) -> PyResult<f64> {
    metrics::instance_dice(&labels(pred, height, width)?, &labels(gt, height, width)?).map_err(err)
}

/// A synthetic image and its label map, both flat. Channels past the
/// first are zero.
#[pyfunction]
#[pyo3(signature = (seed=0, size=64, min_cells=3, max_cells=8, invert=false, channels=2))]
fn synthesize(seed: u64, size: usize, min_cells: usize, max_cells: usize, invert: bool, channels: usize) -> (Vec<f64>, Vec<u32>) {
    let cfg = SynthConfig { size, min_cells, max_cells, invert, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = synth::generate(&cfg, "synthetic", 0, &mut rng);
    (s.image.with_channels(channels).data, s.labels.data)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(labels_to_flow, m)?)?;
    m.add_function(wrap_pyfunction!(flow_to_labels, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(match_instances, m)?)?;
    m.add_function(wrap_pyfunction!(instance_dice, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    Ok(())
}

#[pymodule]
fn ucell(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
