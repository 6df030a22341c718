//! Python bindings: volumes, phantoms, training, prediction, metrics,
//! correlation statistics and kernel embeddings.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mpum::analytics::{self, RoiClass, RoiClassMap};
use mpum::metrics::{self, MaskPair};
use mpum::network::{NetworkConfig, Predictor, Strategy};
use mpum::tensor::Tensor;
use mpum::train::{self, Case, ModelSet, StrategySpec, TrainConfig, Trainer};
use mpum::{viz, volume, Error, ErrorKind, Modality};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match (&e, e.kind()) {
        (Error::Io { .. }, _) => PyOSError::new_err(e.to_string()),
        (_, ErrorKind::Numerical) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for mpum::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn modality(s: &str) -> PyResult<Modality> {
    s.parse().map_err(|e: Error| py_err(e))
}

/// Intensity volume in x-fastest order.
#[pyclass(name = "Volume", module = "mpum_py", from_py_object)]
#[derive(Clone)]
pub struct PyVolume {
    inner: volume::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (data, dims, modality, spacing_mm = (2.0, 2.0, 2.0)))]
    fn new(data: Vec<f32>, dims: [usize; 3], modality: &str, spacing_mm: (f64, f64, f64)) -> PyResult<Self> {
        let s = [spacing_mm.0, spacing_mm.1, spacing_mm.2];
        Ok(Self { inner: volume::Volume::new(data, dims, s, self::modality(modality)?).py()? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, modality = None))]
    fn load(path: PathBuf, modality: Option<&str>) -> PyResult<Self> {
        let m = modality.map(self::modality).transpose()?;
        Ok(Self { inner: volume::read_volume(&path, m).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::write_volume(&self.inner, &path).py()
    }

    /// Copy mapped to the modality's normalised range.
    fn normalized(&self) -> PyResult<Self> {
        Ok(Self { inner: volume::normalize_modality(&self.inner).py()? })
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    #[getter]
    fn spacing_mm(&self) -> [f64; 3] {
        self.inner.spacing_mm
    }

    #[getter]
    fn modality(&self) -> String {
        self.inner.modality.to_string()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Volume({}, dims={:?}, spacing_mm={:?})", self.inner.modality, self.inner.dims, self.inner.spacing_mm)
    }
}

/// Integer label map with its category table (index 0 is background).
#[pyclass(name = "LabelVolume", module = "mpum_py", from_py_object)]
#[derive(Clone)]
pub struct PyLabelVolume {
    inner: volume::LabelVolume,
}

#[pymethods]
impl PyLabelVolume {
    #[new]
    #[pyo3(signature = (labels, dims, category_table, spacing_mm = (2.0, 2.0, 2.0)))]
    fn new(labels: Vec<u16>, dims: [usize; 3], category_table: Vec<String>, spacing_mm: (f64, f64, f64)) -> PyResult<Self> {
        let s = [spacing_mm.0, spacing_mm.1, spacing_mm.2];
        Ok(Self { inner: volume::LabelVolume::new(labels, dims, s, category_table).py()? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, category_table = None))]
    fn load(path: PathBuf, category_table: Option<Vec<String>>) -> PyResult<Self> {
        Ok(Self { inner: volume::read_labels(&path, category_table).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::write_labels(&self.inner, &path).py()
    }

    fn mask(&self, label: u16) -> Vec<bool> {
        self.inner.mask(label)
    }

    /// Volume of one label in mm^3.
    fn region_volume(&self, label: u16) -> PyResult<f64> {
        metrics::region_volume(&self.inner, label).py()
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    #[getter]
    fn spacing_mm(&self) -> [f64; 3] {
        self.inner.spacing_mm
    }

    #[getter]
    fn labels(&self) -> Vec<u16> {
        self.inner.labels.clone()
    }

    #[getter]
    fn category_table(&self) -> Vec<String> {
        self.inner.category_table.clone()
    }

    fn __repr__(&self) -> String {
        format!("LabelVolume(dims={:?}, categories={:?})", self.inner.dims, self.inner.category_table)
    }
}

/// A trained model with its optimiser state and history.
#[pyclass(name = "Model", module = "mpum_py")]
pub struct PyModel {
    inner: Trainer,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: train::load_checkpoint(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        train::save_checkpoint(&self.inner, &path).py()
    }

    #[getter]
    fn categories(&self) -> Vec<String> {
        self.inner.model.categories.clone()
    }

    #[getter]
    fn modalities(&self) -> Vec<String> {
        self.inner.model.config.modalities.iter().map(|m| m.to_string()).collect()
    }

    #[getter]
    fn strategy(&self) -> String {
        self.inner.model.config.strategy.to_string()
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.step()
    }

    fn parameter_count(&self) -> usize {
        self.inner.model.parameter_count()
    }

    /// `(step, loss)` per recorded evaluation.
    fn history(&self) -> Vec<(usize, f64)> {
        self.inner.history.iter().map(|h| (h.step, h.loss)).collect()
    }

    /// Segments a volume already in model range (see `Volume.normalized`).
    fn predict(&self, volume: &PyVolume) -> PyResult<PyLabelVolume> {
        Ok(PyLabelVolume { inner: self.inner.model.predict(&volume.inner, volume.inner.modality).py()? })
    }

    /// Generated kernels for one stage as `(shape, flat data)`.
    fn kernels(&self, modality: &str, stage: usize) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let k = self.inner.model.kernels(self::modality(modality)?, stage).py()?;
        Ok((k.shape().to_vec(), k.data().to_vec()))
    }

    /// Min-max normalised saliency of `category` for a patch-sized volume.
    fn saliency(&self, volume: &PyVolume, stage: usize, category: usize) -> PyResult<PyVolume> {
        let p = self.inner.model.config.patch_size;
        let v = &volume.inner;
        if v.dims != [p, p, p] {
            return Err(PyValueError::new_err(format!("saliency needs a {p}^3 volume, got {:?}", v.dims)));
        }
        let patch = Tensor::new(vec![1, 1, p, p, p], v.data.clone()).py()?;
        Ok(PyVolume { inner: mpum::network::extract_saliency(&self.inner.model, &patch, v.modality, stage, category).py()? })
    }

    /// Mean foreground Dice on `(volume, labels)` pairs.
    fn mean_dice(&self, cases: Vec<(PyVolume, PyLabelVolume)>) -> PyResult<f64> {
        let cases = to_cases(cases)?;
        train::mean_dice(&self.inner.model, &cases).py()
    }

    fn __repr__(&self) -> String {
        format!("Model(strategy={}, categories={:?}, step={})", self.inner.model.config.strategy, self.inner.model.categories, self.inner.step())
    }
}

fn to_cases(cases: Vec<(PyVolume, PyLabelVolume)>) -> PyResult<Vec<Case>> {
    cases.into_iter().enumerate().map(|(i, (v, l))| Case::new(format!("case_{i}"), v.inner, l.inner).py()).collect()
}

/// Phantom volumes (raw scanner units) and their shared labels.
#[pyfunction]
#[pyo3(signature = (seed, size = 32, categories = 3, modalities = vec!["CT".to_string(), "MR".to_string()], lesion = None))]
fn synth_phantom(seed: u64, size: usize, categories: usize, modalities: Vec<String>, lesion: Option<String>) -> PyResult<(Vec<PyVolume>, PyLabelVolume)> {
    let mods: Vec<Modality> = modalities.iter().map(|m| modality(m)).collect::<PyResult<_>>()?;
    let mut ph = volume::synth_phantom(seed, &mods, size, categories).py()?;
    if let Some(name) = lesion {
        volume::add_lesion(&mut ph, seed, &name).py()?;
    }
    Ok((ph.volumes.into_iter().map(|inner| PyVolume { inner }).collect(), PyLabelVolume { inner: ph.labels }))
}

/// Trains under `strategy`; returns one model, or one per modality for
/// the modality-specific strategy. Volumes must be normalised.
#[pyfunction]
#[pyo3(signature = (cases, strategy = "projection", steps = 200, seed = 0, stages = vec![8, 16, 32], d_t = 16, d_m = 8, patch_size = 32, lr = 1e-3, batch = 2, heldout = vec![]))]
#[allow(clippy::too_many_arguments)]
fn train_models(
    cases: Vec<(PyVolume, PyLabelVolume)>,
    strategy: &str,
    steps: usize,
    seed: u64,
    stages: Vec<usize>,
    d_t: usize,
    d_m: usize,
    patch_size: usize,
    lr: f64,
    batch: usize,
    heldout: Vec<(PyVolume, PyLabelVolume)>,
) -> PyResult<Vec<PyModel>> {
    let cases = to_cases(cases)?;
    let heldout = to_cases(heldout)?;
    let first = cases.first().ok_or_else(|| PyValueError::new_err("no training cases"))?;
    let categories: Vec<String> = first.labels.category_table[1..].to_vec();
    let mut mods: Vec<Modality> = cases.iter().map(Case::modality).collect();
    mods.sort();
    mods.dedup();
    let strategy: Strategy = strategy.parse().map_err(py_err)?;
    let net = NetworkConfig { num_categories: categories.len(), stages, d_t, d_m, patch_size, modalities: mods.clone(), strategy };
    let mut tc = TrainConfig::new(steps, seed);
    tc.adam.lr = lr;
    tc.batch = batch;
    let set: ModelSet = train::train(&net, &categories, &cases, &heldout, &StrategySpec::new(strategy, mods), &tc).py()?;
    Ok(set.trainers.into_iter().map(|inner| PyModel { inner }).collect())
}

fn mask_pair(predicted: Vec<bool>, reference: Vec<bool>, dims: [usize; 3], spacing_mm: (f64, f64, f64)) -> PyResult<MaskPair> {
    MaskPair::new(predicted, reference, dims, [spacing_mm.0, spacing_mm.1, spacing_mm.2]).py()
}

#[pyfunction]
fn dice(predicted: Vec<bool>, reference: Vec<bool>, dims: [usize; 3]) -> PyResult<f64> {
    Ok(metrics::dice(&mask_pair(predicted, reference, dims, (1.0, 1.0, 1.0))?))
}

#[pyfunction]
#[pyo3(signature = (predicted, reference, dims, spacing_mm = (2.0, 2.0, 2.0), tolerance_mm = metrics::DEFAULT_TOLERANCE_MM))]
fn surface_dice(predicted: Vec<bool>, reference: Vec<bool>, dims: [usize; 3], spacing_mm: (f64, f64, f64), tolerance_mm: f64) -> PyResult<f64> {
    metrics::surface_dice(&mask_pair(predicted, reference, dims, spacing_mm)?, tolerance_mm).py()
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    analytics::pearson(&x, &y).py()
}

/// `(z_score, p)` for two independent correlations.
#[pyfunction]
fn fisher_compare(r_control: f64, n_control: usize, r_patient: f64, n_patient: usize) -> PyResult<(f64, f64)> {
    let r = analytics::fisher_compare(r_control, n_control, r_patient, n_patient).py()?;
    Ok((r.z_score, r.p))
}

/// `(statistic, df, p)` of Welch's two-sample t-test.
#[pyfunction]
fn welch_t_test(control: Vec<f64>, patient: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let r = analytics::welch_t_test(&control, &patient).py()?;
    Ok((r.statistic, r.df, r.p))
}

/// Pair counts per class for a `{roi: "brain" | "body"}` map.
#[pyfunction]
#[pyo3(signature = (classes, exclude = vec![]))]
fn pair_counts(classes: BTreeMap<String, String>, exclude: Vec<String>) -> PyResult<BTreeMap<&'static str, usize>> {
    let mut map = RoiClassMap::new();
    for (roi, c) in classes {
        let class = match c.as_str() {
            "brain" => RoiClass::Brain,
            "body" => RoiClass::Body,
            other => return Err(PyValueError::new_err(format!("{roi}: class {other:?} is not brain or body"))),
        };
        map.insert(roi, class);
    }
    let (_, c) = analytics::enumerate_pairs(&map, &exclude).py()?;
    Ok(BTreeMap::from([("brain-brain", c.brain_brain), ("brain-body", c.brain_body), ("body-body", c.body_body), ("total", c.total)]))
}

/// Least-squares latent recovered from a projected feature.
#[pyfunction]
#[pyo3(signature = (feature, projection, ridge = mpum::projection::DEFAULT_RIDGE))]
fn reconstruct_latent(feature: Vec<f64>, projection: Vec<Vec<f64>>, ridge: f64) -> PyResult<Vec<f64>> {
    let rows = projection.len();
    let cols = projection.first().map_or(0, Vec::len);
    let p = Tensor::new(vec![rows, cols], projection.into_iter().flatten().collect()).py()?;
    mpum::projection::reconstruct_latent(&feature, &p, ridge).py()
}

#[pyfunction]
fn pca2d(rows: Vec<Vec<f64>>) -> PyResult<Vec<[f64; 2]>> {
    viz::pca2d(&rows).py()
}

/// Coordinates and the `(iteration, KL)` trace.
#[pyfunction]
#[pyo3(signature = (rows, perplexity = 30.0, iterations = 1000, seed = 0))]
fn tsne2d(rows: Vec<Vec<f64>>, perplexity: f64, iterations: usize, seed: u64) -> PyResult<(Vec<[f64; 2]>, Vec<(usize, f64)>)> {
    let cfg = viz::TsneConfig { perplexity, iterations, seed, ..viz::TsneConfig::default() };
    let r = viz::tsne2d(&rows, &cfg).py()?;
    Ok((r.coords, r.kl_trace))
}

#[pyfunction]
fn silhouette(points: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    viz::silhouette(&points, &labels).py()
}

#[pymodule]
fn mpum_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyLabelVolume>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(train_models, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(surface_dice, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_compare, m)?)?;
    m.add_function(wrap_pyfunction!(welch_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(pair_counts, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct_latent, m)?)?;
    m.add_function(wrap_pyfunction!(pca2d, m)?)?;
    m.add_function(wrap_pyfunction!(tsne2d, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    Ok(())
}
