//! Python bindings. Images and maps cross the boundary as nested lists:
//! images as `[channel][row][col]` floats in `[0, 1]`, maps as `[row][col]`.

use std::path::PathBuf;

use deep_fext::fext::{direct_param_count, factorize as factorize_scale, FextNetworkSpec};
use deep_fext::imaging::dataset::to_rgb;
use deep_fext::imaging::{self, Checkpoint, LabeledImage};
use deep_fext::map::{BinaryMap, Map, RealMap};
use deep_fext::metrics::{self, ImageScores};
use deep_fext::predict::{target_probability, Target};
use deep_fext::{Error, ModelSpec, Task, Tensor, TrainConfig, Trainer};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

/// `[channel][row][col]`.
type Image = Vec<Vec<Vec<f32>>>;
/// `[row][col]`.
type Mask = Vec<Vec<bool>>;
type Kernels = Vec<(usize, usize)>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::TrainingAborted { .. } | Error::State(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows_to_map<T: Clone>(rows: Vec<Vec<T>>) -> PyResult<Map<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular 2-D list"));
    }
    Map::from_vec(h, w, rows.concat()).map_err(py_err)
}

fn map_to_rows<T: Clone>(map: &Map<T>) -> Vec<Vec<T>> {
    map.data().chunks(map.width()).map(<[T]>::to_vec).collect()
}

fn planes_to_tensor(planes: Image) -> PyResult<Tensor> {
    let c = planes.len();
    let maps = planes.into_iter().map(rows_to_map).collect::<PyResult<Vec<RealMap>>>()?;
    let (h, w) = maps.first().map(Map::dims).ok_or_else(|| PyValueError::new_err("image has no channels"))?;
    if maps.iter().any(|m| m.dims() != (h, w)) {
        return Err(PyValueError::new_err("channels differ in size"));
    }
    let data = maps.into_iter().flat_map(Map::into_data).collect();
    to_rgb(Tensor::new(&[1, c, h, w], data).map_err(py_err)?).map_err(py_err)
}

fn tensor_to_planes(t: &Tensor) -> Image {
    let [_, c, h, w] = t.dims4();
    (0..c).map(|k| t.plane(0, k).chunks(w).take(h).map(<[f32]>::to_vec).collect()).collect()
}

fn parse_task(task: &str) -> PyResult<Task> {
    task.parse().map_err(py_err)
}

fn binary(rows: Option<Mask>) -> PyResult<Option<BinaryMap>> {
    rows.map(rows_to_map).transpose()
}

/// A feature-extraction network with its mesh classifier.
#[pyclass(name = "Model", module = "deep_fext")]
struct PyModel {
    inner: deep_fext::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (task = "vessel", preset = "fext5-100", seed = 0))]
    fn new(task: &str, preset: &str, seed: u64) -> PyResult<Self> {
        let spec = ModelSpec::preset(preset, parse_task(task)?).map_err(py_err)?;
        Ok(PyModel { inner: deep_fext::Model::new(spec, seed).map_err(py_err)? })
    }

    /// Reads a `.dfxt` checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: imaging::load_checkpoint(path).map_err(py_err)?.model })
    }

    /// Writes a weights-only checkpoint.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint { model: self.inner.clone(), state: None, tag: Some("final".into()) };
        imaging::save_checkpoint(&ckpt, path).map_err(py_err)
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.inner.task().as_str()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.task().num_classes()
    }

    #[getter]
    fn output_features(&self) -> usize {
        self.inner.spec().fext.output_channels()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params().scalar_count()
    }

    /// Per-class probability maps of a `[channel][row][col]` image.
    fn predict(&self, image: Image) -> PyResult<Image> {
        let maps = self.inner.predict_maps(&planes_to_tensor(image)?).map_err(py_err)?;
        Ok(maps.iter().map(map_to_rows).collect())
    }

    /// Vessel probability (class 1, plus class 2 for three-class models).
    fn predict_vessel(&self, image: Image) -> PyResult<Vec<Vec<f32>>> {
        let maps = self.inner.predict_maps(&planes_to_tensor(image)?).map_err(py_err)?;
        Ok(map_to_rows(&target_probability(self.inner.task(), &maps, Target::Vessel).map_err(py_err)?))
    }

    /// The per-pixel feature vector as 100 maps scaled to `[0, 1]`.
    fn feature_maps(&self, image: Image) -> PyResult<Image> {
        let x = self.inner.normalization().apply(&planes_to_tensor(image)?).map_err(py_err)?;
        let maps = deep_fext::export_feature_maps(self.inner.fext(), self.inner.params(), &x).map_err(py_err)?;
        Ok(maps.iter().map(map_to_rows).collect())
    }

    /// Trains in place on one labelled image; returns the per-step losses.
    #[pyo3(signature = (image, mask, steps, learning_rate = 3e-3, patch_size = 64, batch_pixels = 512, seed = 0, fov = None))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        image: Image,
        mask: Mask,
        steps: u64,
        learning_rate: f32,
        patch_size: usize,
        batch_pixels: usize,
        seed: u64,
        fov: Option<Mask>,
    ) -> PyResult<Vec<f64>> {
        let item = LabeledImage::new("python", planes_to_tensor(image)?, rows_to_map(mask)?, None, binary(fov)?)
            .map_err(py_err)?;
        let cfg = TrainConfig {
            seed,
            learning_rate,
            patch_size,
            batch_pixels,
            patches_per_step: 1,
            max_steps: Some(steps),
            ..Default::default()
        };
        let mut trainer = Trainer::new(self.inner.clone(), std::slice::from_ref(&item), cfg).map_err(py_err)?;
        let losses = (0..steps).map(|_| trainer.step()).collect::<Result<Vec<f64>, Error>>().map_err(py_err)?;
        self.inner = trainer.model().clone();
        Ok(losses)
    }

    fn __repr__(&self) -> String {
        format!("Model(task={:?}, features={}, params={})", self.task(), self.output_features(), self.param_count())
    }
}

/// Kernel shapes of the mini-network standing in for an `s × s` convolution,
/// with its parameter count and that of the direct convolution.
#[pyfunction]
#[pyo3(signature = (scale, in_channels = 1, out_channels = 1, refactor = false))]
fn factorize(
    scale: usize,
    in_channels: usize,
    out_channels: usize,
    refactor: bool,
) -> PyResult<(Kernels, usize, usize)> {
    let net = factorize_scale(scale, in_channels, out_channels, refactor).map_err(py_err)?;
    let kernels = net.stages.iter().map(|s| (s.kernel_h, s.kernel_w)).collect();
    Ok((kernels, net.param_count(), direct_param_count(scale, in_channels, out_channels)))
}

/// Channel counts of the preset's feature blocks, input first.
#[pyfunction]
#[pyo3(signature = (preset = "fext5-100"))]
fn block_sizes(preset: &str) -> PyResult<Vec<usize>> {
    Ok(FextNetworkSpec::preset(preset).map_err(py_err)?.block_sizes())
}

/// Precision, recall, F1, average max Dice and kappa of one probability map.
#[pyfunction]
#[pyo3(signature = (prob, gt, fov = None, threshold = 0.5))]
fn scores<'py>(
    py: Python<'py>,
    prob: Vec<Vec<f32>>,
    gt: Mask,
    fov: Option<Mask>,
    threshold: f32,
) -> PyResult<Bound<'py, PyDict>> {
    let s = ImageScores::compute("image", &rows_to_map(prob)?, &rows_to_map(gt)?, binary(fov)?.as_ref(), threshold)
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("precision", s.precision)?;
    d.set_item("recall", s.recall)?;
    d.set_item("f1", s.f1)?;
    d.set_item("max_dice", s.max_dice)?;
    d.set_item("best_threshold", s.best_threshold)?;
    d.set_item("kappa", s.kappa)?;
    Ok(d)
}

/// Best Dice over the thresholds 0.01 … 0.99 and the threshold attaining it.
#[pyfunction]
#[pyo3(signature = (prob, gt, fov = None))]
fn max_dice(prob: Vec<Vec<f32>>, gt: Mask, fov: Option<Mask>) -> PyResult<(f64, f64)> {
    metrics::max_dice(&rows_to_map(prob)?, &rows_to_map(gt)?, binary(fov)?.as_ref()).map_err(py_err)
}

/// Cohen's kappa of two binary maps.
#[pyfunction]
#[pyo3(signature = (pred, gt, fov = None))]
fn kappa(pred: Mask, gt: Mask, fov: Option<Mask>) -> PyResult<f64> {
    let c = metrics::confusion(&rows_to_map(pred)?, &rows_to_map(gt)?, binary(fov)?.as_ref()).map_err(py_err)?;
    metrics::cohens_kappa(c).map_err(py_err)
}

/// One-pixel-wide centerline of a binary mask.
#[pyfunction]
fn skeletonize(mask: Mask) -> PyResult<Mask> {
    Ok(map_to_rows(&imaging::skeletonize(&rows_to_map(mask)?)))
}

/// Number of 8-connected foreground components.
#[pyfunction]
fn count_components(mask: Mask) -> PyResult<usize> {
    Ok(imaging::count_components(&rows_to_map(mask)?))
}

/// Reads a PNG or PNM file as `[channel][row][col]` floats.
#[pyfunction]
fn read_image(path: PathBuf) -> PyResult<Image> {
    Ok(tensor_to_planes(&imaging::decode_image(path).map_err(py_err)?))
}

/// The 128×128 synthetic vessel phantom: `(image, mask)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn smoke_phantom(seed: u64) -> PyResult<(Image, Mask)> {
    let item = deep_fext::synth::smoke_phantom(seed).map_err(py_err)?;
    Ok((tensor_to_planes(&item.image), map_to_rows(&item.vessel_mask)))
}

#[pymodule]
#[pyo3(name = "deep_fext")]
fn deep_fext_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(factorize, m)?)?;
    m.add_function(wrap_pyfunction!(block_sizes, m)?)?;
    m.add_function(wrap_pyfunction!(scores, m)?)?;
    m.add_function(wrap_pyfunction!(max_dice, m)?)?;
    m.add_function(wrap_pyfunction!(kappa, m)?)?;
    m.add_function(wrap_pyfunction!(skeletonize, m)?)?;
    m.add_function(wrap_pyfunction!(count_components, m)?)?;
    m.add_function(wrap_pyfunction!(read_image, m)?)?;
    m.add_function(wrap_pyfunction!(smoke_phantom, m)?)?;
    Ok(())
}
