//! Python bindings: corpus generation, targets, post-processing, metrics,
//! losses, models and training.
//!
//! Images cross the boundary as nested lists: RGB images as rows of
//! `[r, g, b]`, label maps as rows of ints, probability maps as rows of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyIndexError, PyOSError, PyValueError};
use pyo3::prelude::*;

use cianet::config::ExperimentConfig;
use cianet::data::{self, CorpusConfig, GeneratorConfig, Split};
use cianet::image::{Grid, LabelMap as CoreLabels, ProbMap, RgbImage};
use cianet::model::{checkpoint, CiaNet, CiaNetConfig};
use cianet::post::PostConfig;
use cianet::train::{self, EvalConfig};

fn py_err(e: cianet::Error) -> PyErr {
    let msg = e.to_string();
    match e {
        cianet::Error::Missing(_) => PyFileNotFoundError::new_err(msg),
        cianet::Error::Io { .. } => PyOSError::new_err(msg),
        cianet::Error::Numeric(_) => PyArithmeticError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn grid<T: Copy + Default>(rows: Vec<Vec<T>>, what: &str) -> PyResult<Grid<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err(format!("{what}: rows differ in length")));
    }
    Grid::from_raw(w, h, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn rows<T: Copy + Default>(g: &Grid<T>) -> Vec<Vec<T>> {
    g.data().chunks(g.width().max(1)).map(<[T]>::to_vec).collect()
}

fn rgb(rows_in: Vec<Vec<[u8; 3]>>) -> PyResult<RgbImage> {
    let h = rows_in.len();
    let w = rows_in.first().map_or(0, Vec::len);
    if rows_in.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image: rows differ in length"));
    }
    RgbImage::from_raw(w, h, rows_in.into_iter().flatten().flatten().collect()).map_err(py_err)
}

fn rgb_rows(img: &RgbImage) -> Vec<Vec<[u8; 3]>> {
    (0..img.height()).map(|y| (0..img.width()).map(|x| img.get(x, y)).collect()).collect()
}

fn parse_split(name: &str) -> PyResult<Vec<Split>> {
    match name {
        "test" => Ok(vec![Split::TestSeen, Split::TestUnseen]),
        "all" => Ok(Split::ALL.to_vec()),
        other => other
            .parse()
            .map(|s| vec![s])
            .map_err(|_| PyValueError::new_err(format!("unknown split {other:?}"))),
    }
}

/// Instance label map (0 is background).
#[pyclass(name = "LabelMap", module = "cianet_py", skip_from_py_object)]
#[derive(Clone)]
struct PyLabelMap {
    inner: CoreLabels,
}

#[pymethods]
impl PyLabelMap {
    #[new]
    fn new(rows_in: Vec<Vec<u32>>) -> PyResult<Self> {
        Ok(PyLabelMap {
            inner: grid(rows_in, "labels")?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn instance_count(&self) -> usize {
        self.inner.instance_count()
    }

    fn to_list(&self) -> Vec<Vec<u32>> {
        rows(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "LabelMap({}x{}, {} instances)",
            self.inner.width(),
            self.inner.height(),
            self.inner.instance_count()
        )
    }
}

/// Synthetic corpus: train, test-seen and test-unseen splits.
#[pyclass(name = "Corpus", module = "cianet_py")]
struct PyCorpus {
    inner: data::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (seed, train=200, test_seen=20, test_unseen=20))]
    fn generate(seed: u64, train: usize, test_seen: usize, test_unseen: usize) -> PyResult<Self> {
        let cfg = CorpusConfig {
            train,
            test_seen,
            test_unseen,
            ..CorpusConfig::default()
        };
        Ok(PyCorpus {
            inner: data::Corpus::generate(&cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: data::Corpus::read(&path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    /// `(id, split, image rows, LabelMap)` for sample `index`.
    fn sample(&self, index: usize) -> PyResult<(String, String, Vec<Vec<[u8; 3]>>, PyLabelMap)> {
        let entry = self
            .inner
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("sample {index} out of range")))?;
        let rec = &self.inner.records[index];
        Ok((
            entry.id().to_string(),
            entry.split.to_string(),
            rgb_rows(&rec.image),
            PyLabelMap {
                inner: rec.labels.clone(),
            },
        ))
    }

    fn digest(&self) -> String {
        self.inner.manifest.generator_digest.clone()
    }
}

/// One synthetic image and its instance labels.
#[pyfunction]
#[pyo3(signature = (seed, unseen=false))]
fn generate_sample(seed: u64, unseen: bool) -> PyResult<(Vec<Vec<[u8; 3]>>, PyLabelMap)> {
    let cfg = if unseen {
        GeneratorConfig::unseen()
    } else {
        GeneratorConfig::default()
    };
    let s = data::generate_sample(&cfg, seed).map_err(py_err)?;
    Ok((rgb_rows(&s.image), PyLabelMap { inner: s.labels }))
}

/// `(nuclei, contour)` boolean masks after contour subtraction.
#[pyfunction]
#[pyo3(signature = (labels, radius=1))]
fn extract_targets(labels: &PyLabelMap, radius: usize) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
    let t = data::extract_targets(&labels.inner, radius);
    (rows(&t.nuclei), rows(&t.contour))
}

/// Marker thresholding, components, size filter and barrier-limited regrowth.
#[pyfunction]
#[pyo3(signature = (p_nuclei, p_contour, threshold=None, min_area=None, dilation_radius=None))]
fn extract_instances(
    p_nuclei: Vec<Vec<f32>>,
    p_contour: Vec<Vec<f32>>,
    threshold: Option<f64>,
    min_area: Option<usize>,
    dilation_radius: Option<usize>,
) -> PyResult<PyLabelMap> {
    let mut cfg = PostConfig::default();
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    if let Some(a) = min_area {
        cfg.min_area = a;
    }
    if let Some(r) = dilation_radius {
        cfg.post_dilation_radius = r;
    }
    let pn: ProbMap = grid(p_nuclei, "p_nuclei")?;
    let pc: ProbMap = grid(p_contour, "p_contour")?;
    Ok(PyLabelMap {
        inner: cianet::post::extract_instances(&pn, &pc, &cfg).map_err(py_err)?,
    })
}

#[pyfunction]
fn aji(gt: &PyLabelMap, pred: &PyLabelMap) -> PyResult<f64> {
    cianet::metrics::aji(&gt.inner, &pred.inner).map_err(py_err)
}

/// `(precision, recall, f1)` with greedy one-to-one IoU matching.
#[pyfunction]
#[pyo3(signature = (gt, pred, iou_threshold=0.5))]
fn f1_detection(gt: &PyLabelMap, pred: &PyLabelMap, iou_threshold: f64) -> PyResult<(f64, f64, f64)> {
    let d = cianet::metrics::f1_detection(&gt.inner, &pred.inner, iou_threshold).map_err(py_err)?;
    Ok((d.precision, d.recall, d.f1))
}

/// `(value, dloss/dp)` of a per-pixel nuclei loss.
#[pyfunction]
#[pyo3(signature = (name, p, t, gamma=0.2))]
fn pixel_loss(name: &str, p: f64, t: f64, gamma: f64) -> PyResult<(f64, f64)> {
    let cfg = cianet::losses::LossConfig {
        nuclei_loss: name.parse().map_err(py_err)?,
        gamma,
        ..Default::default()
    };
    let l = cfg.pixel(p, t).map_err(py_err)?;
    Ok((l.value, l.grad))
}

#[pyfunction]
fn soft_dice(p: Vec<f64>, q: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    let d = cianet::losses::soft_dice(&p, &q).map_err(py_err)?;
    Ok((d.value, d.grad))
}

/// `(fractions, cumulative shares)` of losses sorted in descending order.
#[pyfunction]
fn loss_cdf(losses: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let c = cianet::losses::loss_cdf(&losses).map_err(py_err)?;
    Ok((c.fractions, c.cumulative))
}

/// CIA-Net model with f32 weights.
#[pyclass(name = "Model", module = "cianet_py")]
struct PyModel {
    inner: CiaNet<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (preset="toy", seed=0, use_iam=true))]
    fn new(preset: &str, seed: u64, use_iam: bool) -> PyResult<Self> {
        let mut cfg = match preset {
            "toy" => CiaNetConfig::toy(),
            "paper" => CiaNetConfig::paper(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?} (toy or paper)"))),
        };
        cfg.use_iam = use_iam;
        Ok(PyModel {
            inner: CiaNet::build(&cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(&path).map_err(py_err)?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &serde_json::json!({}), &path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn use_iam(&self) -> bool {
        self.inner.config.use_iam
    }

    /// `(p_nuclei, p_contour)` at full resolution (tiled for large images).
    fn predict(&self, image: Vec<Vec<[u8; 3]>>) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let (pn, pc) = train::predict_maps(&self.inner, &rgb(image)?, &EvalConfig::default()).map_err(py_err)?;
        Ok((rows(&pn), rows(&pc)))
    }

    fn segment(&self, image: Vec<Vec<[u8; 3]>>) -> PyResult<PyLabelMap> {
        let (labels, _, _) =
            train::predict_instances(&self.inner, &rgb(image)?, &PostConfig::default(), &EvalConfig::default())
                .map_err(py_err)?;
        Ok(PyLabelMap { inner: labels })
    }

    /// Mean AJI per split (`test`, `all` or a split name).
    #[pyo3(signature = (corpus, split="test"))]
    fn evaluate(&self, corpus: &PyCorpus, split: &str) -> PyResult<std::collections::BTreeMap<String, f64>> {
        let report = train::evaluate_model(
            &self.inner,
            &corpus.inner,
            &parse_split(split)?,
            &PostConfig::default(),
            &EvalConfig::default(),
        )
        .map_err(py_err)?;
        let mut out: std::collections::BTreeMap<String, f64> =
            report.splits.iter().map(|(k, v)| (k.clone(), v.aji)).collect();
        out.insert("overall".into(), report.overall.aji);
        Ok(out)
    }
}

/// Trains on the corpus' training split with `key=value` config overrides.
/// Returns the model and the per-step loss trace.
#[pyfunction]
#[pyo3(signature = (corpus, overrides=Vec::new(), out=None))]
fn train_model(corpus: &PyCorpus, overrides: Vec<String>, out: Option<PathBuf>) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = ExperimentConfig::default().with_overrides(&overrides).map_err(py_err)?;
    let outcome = train::run_training(&cfg.train, &corpus.inner, &cfg.post, out.as_deref()).map_err(py_err)?;
    Ok((
        PyModel { inner: outcome.model },
        outcome.log.iter().map(|r| r.loss).collect(),
    ))
}

#[pymodule]
fn cianet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLabelMap>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(extract_targets, m)?)?;
    m.add_function(wrap_pyfunction!(extract_instances, m)?)?;
    m.add_function(wrap_pyfunction!(aji, m)?)?;
    m.add_function(wrap_pyfunction!(f1_detection, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_loss, m)?)?;
    m.add_function(wrap_pyfunction!(soft_dice, m)?)?;
    m.add_function(wrap_pyfunction!(loss_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    Ok(())
}
