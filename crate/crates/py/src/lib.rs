//! Python bindings: boxes and NMS, synthetic datasets, configuration,
//! training, checkpoints, detection and evaluation.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ssod_core::boxgeom::{self, BBox};
use ssod_core::checkpoint::Checkpoint;
use ssod_core::detector::{Detection, DetectorState};
use ssod_core::eval::{evaluate, pseudo_quality, EvalResult, Labeler};
use ssod_core::sample::ImageSample;
use ssod_core::synthdata::{dataset_hash, Dataset, GenConfig};
use ssod_core::teaching::corectify_fuse;
use ssod_core::trainer::{lr_at, measure_pseudo_quality, ModelPair, TrainConfig, Trainer, CONFIG_KEYS};
use ssod_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Parse { .. } | Error::Degenerate(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::Internal(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn bbox(b: [f64; 4]) -> PyResult<BBox> {
    BBox::new(b[0], b[1], b[2], b[3]).map_err(to_py)
}

fn to_json<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    Ok(boxgeom::iou(&bbox(a)?, &bbox(b)?))
}

/// Greedy NMS; returns kept indices in descending score order. With
/// `labels`, suppression only happens within a class.
#[pyfunction]
#[pyo3(signature = (boxes, scores, iou_threshold, labels=None))]
fn nms(boxes: Vec<[f64; 4]>, scores: Vec<f64>, iou_threshold: f64, labels: Option<Vec<usize>>) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let parsed = boxes.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
    match labels {
        None => Ok(boxgeom::nms(&parsed.into_iter().zip(scores).collect::<Vec<_>>(), iou_threshold)),
        Some(l) if l.len() == parsed.len() => {
            let dets: Vec<(BBox, f64, usize)> = parsed.into_iter().zip(scores).zip(l).map(|((b, s), c)| (b, s, c)).collect();
            Ok(boxgeom::nms_classwise(&dets, iou_threshold))
        }
        Some(_) => Err(PyValueError::new_err("labels and boxes differ in length")),
    }
}

/// Fuse a detection with its partner's refinement; returns `(probs, box)`.
#[pyfunction]
fn fuse(probs_a: Vec<f64>, box_a: [f64; 4], probs_b: Vec<f64>, box_b: [f64; 4]) -> PyResult<(Vec<f64>, [f64; 4])> {
    let r = corectify_fuse(&probs_a, bbox(box_a)?, &probs_b, bbox(box_b)?).map_err(to_py)?;
    Ok((r.fused_probs, r.fused_box.to_array()))
}

#[pyclass(name = "Dataset", module = "pyssod", frozen)]
struct PyDataset {
    inner: Arc<Dataset>,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (count=2000, classes=3, image_size=64, max_shapes=4, labeled_frac=0.1, seed=7))]
    fn generate(count: usize, classes: usize, image_size: usize, max_shapes: usize, labeled_frac: f64, seed: u64) -> PyResult<Self> {
        let cfg = GenConfig {
            seed,
            count,
            image_size,
            classes,
            max_shapes,
        };
        Ok(PyDataset {
            inner: Arc::new(Dataset::generate(&cfg, labeled_frac).map_err(to_py)?),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: Arc::new(Dataset::load(&path).map_err(to_py)?),
        })
    }

    /// Write the dataset directory and return its content hash.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        self.inner.save(&path).map_err(to_py)?;
        dataset_hash(&path).map_err(to_py)
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    #[getter]
    fn num_labeled(&self) -> usize {
        self.inner.split.n_l()
    }

    #[getter]
    fn num_unlabeled(&self) -> usize {
        self.inner.split.n_u()
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    /// Sample `index` as `(id, pixels, annotations)`: pixels are planar RGB
    /// floats `[3][h][w]`, annotations `None` or a list of `(box, class)`.
    #[allow(clippy::type_complexity)]
    fn sample(&self, index: usize) -> PyResult<(String, Vec<Vec<Vec<f32>>>, Option<Vec<([f64; 4], usize)>>)> {
        let s = self
            .inner
            .samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        let (w, h) = (s.width(), s.height());
        let pixels = (0..3).map(|c| s.image.plane(c).chunks(w).take(h).map(|r| r.to_vec()).collect()).collect();
        let ann = s
            .annotations
            .as_ref()
            .map(|a| a.items.iter().map(|i| (i.bbox.to_array(), i.class)).collect());
        Ok((s.id.clone(), pixels, ann))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(images={}, labeled={}, unlabeled={}, classes={:?})",
            self.inner.samples.len(),
            self.inner.split.n_l(),
            self.inner.split.n_u(),
            self.inner.classes
        )
    }
}

impl PyDataset {
    fn split(&self, split: &str) -> PyResult<Vec<&ImageSample>> {
        match split {
            "labeled" => Ok(self.inner.labeled_samples()),
            "heldout" => Ok(self.inner.oracle().samples()),
            "all" => Ok(self.inner.samples.iter().collect()),
            other => Err(PyValueError::new_err(format!("unknown split {other:?} (labeled, heldout or all)"))),
        }
    }
}

#[pyclass(name = "TrainConfig", module = "pyssod")]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// Defaults, then any `key=value` overrides (same keys as the CLI).
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = TrainConfig::default();
        if let Some(d) = overrides {
            for (k, v) in d.iter() {
                let key: String = k.extract()?;
                let value = match v.extract::<bool>() {
                    Ok(b) => b.to_string(),
                    Err(_) => v.str()?.to_string(),
                };
                inner.set(&key, &value).map_err(to_py)?;
            }
        }
        inner.validate().map_err(to_py)?;
        Ok(PyTrainConfig { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(to_py)?;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        CONFIG_KEYS.to_vec()
    }

    fn to_flat(&self) -> String {
        self.inner.to_flat()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_json(py, &self.inner.resolved())
    }

    fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, &self.inner)
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.inner.total_steps
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(mode={}, tau={}, total_steps={})", self.inner.mode, self.inner.tau, self.inner.total_steps)
    }
}

fn detection_tuples(dets: Vec<Detection>) -> Vec<([f64; 4], usize, f64)> {
    dets.into_iter().map(|d| (d.bbox.to_array(), d.label, d.confidence)).collect()
}

fn eval_dict<'py>(py: Python<'py>, r: &EvalResult) -> PyResult<Bound<'py, PyAny>> {
    to_json(py, r)
}

/// A trained (or freshly initialized) detector, model a of a checkpoint.
#[pyclass(name = "Detector", module = "pyssod", frozen)]
struct PyDetector {
    state: DetectorState,
    partner: Option<DetectorState>,
}

#[pymethods]
impl PyDetector {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        let mut models = ck.models.into_iter().map(|m| m.detector);
        let state = models.next().ok_or_else(|| PyValueError::new_err("checkpoint has no models"))?;
        Ok(PyDetector {
            state,
            partner: models.next(),
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.state.num_params()
    }

    #[getter]
    fn has_partner(&self) -> bool {
        self.partner.is_some()
    }

    /// Detections on dataset image `index` as `(box, class, confidence)`.
    #[pyo3(signature = (dataset, index, score_threshold=0.001, nms_iou=0.5))]
    fn detect(&self, dataset: &PyDataset, index: usize, score_threshold: f64, nms_iou: f64) -> PyResult<Vec<([f64; 4], usize, f64)>> {
        let s = dataset
            .inner
            .samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        Ok(detection_tuples(self.state.detect(&s.image, score_threshold, nms_iou).map_err(to_py)?))
    }

    #[pyo3(signature = (dataset, split="labeled", score_threshold=0.001, nms_iou=0.5))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        split: &str,
        score_threshold: f64,
        nms_iou: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let samples = dataset.split(split)?;
        let r = evaluate(&self.state, &samples, &dataset.inner.classes, score_threshold, nms_iou).map_err(to_py)?;
        eval_dict(py, &r)
    }

    /// Pseudo-label quality on the held-out annotations of unlabeled images;
    /// `corectify=True` uses the checkpoint's second model as partner.
    #[pyo3(signature = (dataset, tau=0.9, nms_iou=0.5, corectify=false))]
    fn pseudo_quality<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        tau: f64,
        nms_iou: f64,
        corectify: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let labeler = match (corectify, &self.partner) {
            (false, _) => Labeler::Single(&self.state),
            (true, Some(p)) => Labeler::Pair(&self.state, p),
            (true, None) => return Err(PyValueError::new_err("checkpoint holds a single model")),
        };
        let samples = dataset.split("heldout")?;
        let r = pseudo_quality(labeler, &samples, &dataset.inner.classes, tau, nms_iou).map_err(to_py)?;
        eval_dict(py, &r)
    }
}

/// Stepwise training on a dataset. Holds the model state between calls.
#[pyclass(name = "Trainer", module = "pyssod")]
struct PyTrainer {
    dataset: Arc<Dataset>,
    config: TrainConfig,
    pair: ModelPair,
    step: usize,
}

impl PyTrainer {
    fn with_trainer<T>(&mut self, f: impl FnOnce(&mut Trainer<'_>) -> ssod_core::Result<T>) -> PyResult<T> {
        let ck = self.pair.to_checkpoint(self.step, &self.config);
        let mut t = Trainer::resume(&self.dataset, &self.dataset.split, &self.config, &ck).map_err(to_py)?;
        let out = f(&mut t);
        self.step = t.step();
        self.pair = t.into_pair();
        out.map_err(to_py)
    }
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(dataset: &PyDataset, config: &PyTrainConfig) -> PyResult<Self> {
        let mut cfg = config.inner.clone();
        cfg.arch.num_classes = dataset.inner.num_classes();
        let t = Trainer::new(&dataset.inner, &dataset.inner.split, &cfg).map_err(to_py)?;
        let config = t.config().clone();
        let pair = t.into_pair();
        Ok(PyTrainer {
            dataset: Arc::clone(&dataset.inner),
            config,
            pair,
            step: 0,
        })
    }

    #[getter]
    fn step(&self) -> usize {
        self.step
    }

    #[getter]
    fn done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Run up to `n` iterations (stopping at the end of the schedule) and
    /// return their metrics records.
    #[pyo3(signature = (n=1))]
    fn advance<'py>(&mut self, py: Python<'py>, n: usize) -> PyResult<Vec<Bound<'py, PyAny>>> {
        let records = self.with_trainer(|t| {
            let mut out = Vec::new();
            for _ in 0..n {
                if t.is_done() {
                    break;
                }
                out.push(t.advance()?);
            }
            Ok(out)
        })?;
        records.iter().map(|r| to_json(py, r)).collect()
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.pair.to_checkpoint(self.step, &self.config).save(&path).map_err(to_py)
    }

    fn detector(&self) -> PyDetector {
        PyDetector {
            state: self.pair.a.detector.clone(),
            partner: self.pair.b.as_ref().map(|b| b.detector.clone()),
        }
    }

    #[pyo3(signature = (n_images=200))]
    fn pseudo_quality<'py>(&self, py: Python<'py>, n_images: usize) -> PyResult<Bound<'py, PyAny>> {
        let r = measure_pseudo_quality(&self.pair, &self.dataset, &self.config, self.step, n_images).map_err(to_py)?;
        to_json(py, &r)
    }
}

#[pymodule]
fn pyssod(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyTrainer>()?;
    Ok(())
}
