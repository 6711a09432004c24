//! Python bindings for `seqdet`.
//!
//! Configs cross the boundary as JSON strings; reports come back the same
//! way so callers can `json.loads` them.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use seqdet::config::RunConfig;
use seqdet::decoder::DecoderConfig;
use seqdet::eval::{detect_all, evaluate};
use seqdet::geometry;
use seqdet::matching::{self, MetricKind, SimilarityMetric};
use seqdet::numerics::checkpoint::{load_params, save_checkpoint};
use seqdet::numerics::ParamStore;
use seqdet::scenegen;
use seqdet::training::{check_compatible, fit, init_model, toy_grad_check, StepMetrics, TOY_CHECK_SEED};
use seqdet::words::{self, CategoryWord, RegionWord};
use seqdet::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Checksum(_) | Error::Truncated(_) | Error::BadMagic(_) | Error::Version { .. } | Error::Json { .. } => {
            PyIOError::new_err(e.to_string())
        }
        Error::Config(_) | Error::Shape { .. } | Error::Compatibility(_) | Error::UnknownParameter(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_config(json: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match json {
        Some(text) => RunConfig::from_json(text, "<python>".as_ref()).map_err(py_err)?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn parse_metric(name: &str, alpha: f64) -> PyResult<SimilarityMetric> {
    let metric: MetricKind =
        serde_json::from_value(serde_json::Value::String(name.into())).map_err(|_| PyValueError::new_err(format!("unknown metric `{name}`")))?;
    Ok(SimilarityMetric {
        alpha,
        ..SimilarityMetric::new(metric)
    })
}

/// An oriented 3D box: bottom-centered height, heading about +z.
#[pyclass(name = "Box3D", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyBox(geometry::Box3D);

#[pymethods]
impl PyBox {
    #[new]
    #[pyo3(signature = (center, size, theta, class_id = 0))]
    fn new(center: [f64; 3], size: [f64; 3], theta: f64, class_id: usize) -> PyResult<Self> {
        geometry::Box3D::new(center, size, theta, class_id).map(Self).map_err(py_err)
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center()
    }

    #[getter]
    fn size(&self) -> [f64; 3] {
        self.0.size()
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta
    }

    #[getter]
    fn class_id(&self) -> usize {
        self.0.class_id
    }

    fn volume(&self) -> f64 {
        self.0.volume()
    }

    fn corners(&self) -> Vec<[f64; 3]> {
        geometry::box_corners(&self.0).to_vec()
    }

    fn __repr__(&self) -> String {
        let b = &self.0;
        format!(
            "Box3D(center=[{}, {}, {}], size=[{}, {}, {}], theta={}, class_id={})",
            b.x, b.y, b.z, b.l, b.w, b.h, b.theta, b.class_id
        )
    }
}

#[pyfunction]
fn bev_iou(a: PyBox, b: PyBox) -> f64 {
    geometry::bev_iou(&a.0, &b.0)
}

#[pyfunction]
fn iou3d(a: PyBox, b: PyBox) -> f64 {
    geometry::iou3d(&a.0, &b.0)
}

/// A box written as region, location, orientation, size and category words.
#[pyclass(name = "ObjectSequence", frozen, from_py_object)]
#[derive(Clone)]
struct PySequence(words::ObjectSequence);

#[pymethods]
impl PySequence {
    /// Encodes `b` against region `(r_x, r_y, r_l, r_w)`.
    #[staticmethod]
    fn encode(b: PyBox, region: (f64, f64, f64, f64), classes: usize) -> PyResult<Self> {
        let r = RegionWord::new(region.0, region.1, region.2, region.3).map_err(py_err)?;
        words::encode(&b.0, &r, classes).map(Self).map_err(py_err)
    }

    /// Decoded box and its foreground score.
    fn decode(&self) -> PyResult<(PyBox, f64)> {
        let s = words::decode(&self.0).map_err(py_err)?;
        Ok((PyBox(s.b), s.score))
    }

    /// Copy with the category word replaced by `probs` (foreground classes
    /// first, background last).
    fn with_category(&self, probs: Vec<f64>) -> Self {
        let mut s = self.0.clone();
        s.category = CategoryWord { p: probs };
        Self(s)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("sequence serializes")
    }
}

/// Similarity in [0, 1]; `gt=None` is the empty target.
#[pyfunction]
#[pyo3(signature = (pred, gt, metric = "word_distance", alpha = 0.25))]
fn similarity(pred: &PySequence, gt: Option<PySequence>, metric: &str, alpha: f64) -> PyResult<f64> {
    let m = parse_metric(metric, alpha)?;
    matching::similarity(&pred.0, gt.as_ref().map(|g| &g.0), &m).map_err(py_err)
}

/// Maximum-total assignment of rows to distinct columns.
#[pyfunction]
fn assign(scores: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    if let Some(first) = scores.first() {
        if scores.iter().any(|r| r.len() != first.len()) || first.len() < scores.len() {
            return Err(PyValueError::new_err("scores must be rectangular with at least as many columns as rows"));
        }
    }
    Ok(matching::assign(&scores))
}

/// A synthetic point cloud with its ground-truth boxes.
#[pyclass(name = "Scene", frozen, from_py_object)]
#[derive(Clone)]
struct PyScene(scenegen::Scene);

#[pymethods]
impl PyScene {
    #[getter]
    fn points(&self) -> Vec<[f64; 4]> {
        self.0.points.clone()
    }

    #[getter]
    fn boxes(&self) -> Vec<PyBox> {
        self.0.boxes.iter().copied().map(PyBox).collect()
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        scenegen::read_scene_file(&path).map(Self).map_err(py_err)
    }

    fn write(&self, path: PathBuf) -> PyResult<String> {
        scenegen::write_scene_file(&path, &self.0).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.points.len()
    }
}

/// Scene `index` under the run config's scene settings.
#[pyfunction]
#[pyo3(signature = (index, config = None))]
fn generate_scene(index: u64, config: Option<&str>) -> PyResult<PyScene> {
    let cfg = parse_config(config)?;
    scenegen::generate_scene(&cfg.scenegen, index).map(PyScene).map_err(py_err)
}

/// The full default run config as JSON.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

/// Parameters plus the run config they belong to.
#[pyclass(name = "Model")]
struct PyModel {
    cfg: RunConfig,
    store: ParamStore,
}

#[pymethods]
impl PyModel {
    /// Fresh parameters; `seed` defaults to the config's training seed.
    #[new]
    #[pyo3(signature = (config = None, seed = None))]
    fn new(config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        let store = init_model(&cfg.model, seed.unwrap_or(cfg.train.seed));
        Ok(Self { cfg, store })
    }

    #[staticmethod]
    #[pyo3(signature = (checkpoint, config = None))]
    fn load(checkpoint: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        let store = load_params(&checkpoint).map_err(py_err)?;
        check_compatible(&store, &cfg.model).map_err(py_err)?;
        Ok(Self { cfg, store })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.store).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.store.step()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn config(&self) -> String {
        self.cfg.to_json()
    }

    /// Trains on `scenes` under the model's config; returns per-step
    /// metrics as JSON lines.
    #[pyo3(signature = (scenes, threads = 1))]
    fn fit(&mut self, py: Python<'_>, scenes: Vec<PyScene>, threads: usize) -> PyResult<Vec<String>> {
        let scenes: Vec<scenegen::Scene> = scenes.into_iter().map(|s| s.0).collect();
        let cfg = &self.cfg;
        let store = &mut self.store;
        py.detach(|| {
            let mut log = Vec::new();
            fit(&cfg.fit_config(threads.max(1)), &scenes, store, &mut |m: &StepMetrics, _| {
                log.push(serde_json::to_string(m).expect("metrics serialize"));
                Ok(())
            })
            .map(|()| log)
        })
        .map_err(py_err)
    }

    /// Detections as `(box, score)` pairs, one list per scene; `threshold`
    /// defaults to the config's score threshold.
    #[pyo3(signature = (scenes, threshold = None))]
    fn detect(&self, scenes: Vec<PyScene>, threshold: Option<f64>) -> PyResult<Vec<Vec<(PyBox, f64)>>> {
        let scenes: Vec<scenegen::Scene> = scenes.into_iter().map(|s| s.0).collect();
        let t = threshold.unwrap_or(self.cfg.eval.score_threshold);
        let dets = detect_all(&self.store, &self.cfg.model, &scenes, t, 1).map_err(py_err)?;
        Ok(dets
            .into_iter()
            .map(|ds| ds.into_iter().map(|d| (PyBox(d.b), d.score)).collect())
            .collect())
    }

    /// The evaluation report as JSON.
    fn evaluate(&self, scenes: Vec<PyScene>) -> PyResult<String> {
        let scenes: Vec<scenegen::Scene> = scenes.into_iter().map(|s| s.0).collect();
        let report = evaluate(&self.store, &self.cfg.model, &scenes, &self.cfg.class_names(), &self.cfg.eval, 1).map_err(py_err)?;
        Ok(serde_json::to_string(&report).expect("report serializes"))
    }
}

/// Largest relative gradient error of the toy model check.
#[pyfunction]
fn check_grad() -> PyResult<f64> {
    let decoder = DecoderConfig {
        classes: seqdet::training::toy_scene_config().classes.len(),
        ..DecoderConfig::default()
    };
    toy_grad_check(decoder, TOY_CHECK_SEED, None).map(|r| r.max_error).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "seqdet")]
fn seqdet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(bev_iou, m)?)?;
    m.add_function(wrap_pyfunction!(iou3d, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(assign, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(check_grad, m)?)?;
    Ok(())
}
