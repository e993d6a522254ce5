//! Python bindings for the core volume types, the warp/field algebra, the
//! phantom generator, segmentation metrics, and the training/inference entry
//! points.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use sscardiac::metrics;
use sscardiac::phantom::{corpus_spec, export_study, generate};
use sscardiac::pipeline::{
    self, load_study, train_motion as core_train_motion,
    train_segmentation as core_train_segmentation, Direction, MotionNet, SegNet, TrainConfig,
};
use sscardiac::transform;
use sscardiac::volume::{self, DeformationField, Dims, LabelMask, Spacing, VolumeGrid};
use std::path::{Path, PathBuf};

fn to_py_err(e: sscardiac::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyIOError::new_err(e.to_string())
    }
}

fn parse_spacing(spacing: [f64; 3]) -> Spacing {
    Spacing::new(spacing[0], spacing[1], spacing[2])
}

/// A 3D scalar volume with voxel spacing.
#[pyclass(name = "Volume")]
#[derive(Clone)]
struct PyVolume {
    inner: VolumeGrid,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> PyResult<Self> {
        VolumeGrid::new(Dims::new(dims[0], dims[1], dims[2]), parse_spacing(spacing), data)
            .map(|inner| PyVolume { inner })
            .map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        volume::load_volume(&path)
            .map(|inner| PyVolume { inner })
            .map_err(to_py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::save_volume(&self.inner, &path).map_err(to_py_err)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        (self.inner.dims.nx, self.inner.dims.ny, self.inner.dims.nz)
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        (
            self.inner.spacing.sx,
            self.inner.spacing.sy,
            self.inner.spacing.sz,
        )
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.inner.at(x, y, z)
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn normalize(&self) -> PyVolume {
        PyVolume {
            inner: volume::normalize(&self.inner),
        }
    }

    fn clip_intensities(&self, top_fraction: f64) -> PyResult<PyVolume> {
        volume::clip_intensities(&self.inner, top_fraction)
            .map(|inner| PyVolume { inner })
            .map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Volume(dims=({}, {}, {}))",
            self.inner.dims.nx, self.inner.dims.ny, self.inner.dims.nz
        )
    }
}

/// A per-voxel 3-vector displacement field (voxel units).
#[pyclass(name = "Field")]
#[derive(Clone)]
struct PyField {
    inner: DeformationField,
}

#[pymethods]
impl PyField {
    #[new]
    fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> PyResult<Self> {
        DeformationField::new(Dims::new(dims[0], dims[1], dims[2]), parse_spacing(spacing), data)
            .map(|inner| PyField { inner })
            .map_err(to_py_err)
    }

    #[staticmethod]
    fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> PyField {
        PyField {
            inner: DeformationField::zeros(
                Dims::new(dims[0], dims[1], dims[2]),
                parse_spacing(spacing),
            ),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        volume::load_field(&path)
            .map(|inner| PyField { inner })
            .map_err(to_py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::save_field(&self.inner, &path).map_err(to_py_err)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        (self.inner.dims.nx, self.inner.dims.ny, self.inner.dims.nz)
    }

    fn at(&self, x: usize, y: usize, z: usize) -> (f32, f32, f32) {
        let v = self.inner.at(x, y, z);
        (v[0], v[1], v[2])
    }

    fn magnitude(&self) -> PyVolume {
        PyVolume {
            inner: transform::field_magnitude(&self.inner),
        }
    }

    fn mean_magnitude(&self) -> f64 {
        transform::mean_magnitude(&self.inner)
    }

    /// compose(self, then): warping by the result equals warping by `then`
    /// and then by `self`.
    fn compose(&self, then: &PyField) -> PyResult<PyField> {
        transform::compose(&self.inner, &then.inner)
            .map(|inner| PyField { inner })
            .map_err(to_py_err)
    }

    #[pyo3(signature = (iterations = transform::INVERT_DEFAULT_ITERATIONS))]
    fn invert(&self, iterations: usize) -> PyResult<(PyField, f64)> {
        transform::invert_field(&self.inner, iterations)
            .map(|r| (PyField { inner: r.field }, r.residual))
            .map_err(to_py_err)
    }

    #[pyo3(signature = (threshold_quantile = transform::DISTANCE_MAP_DEFAULT_QUANTILE))]
    fn distance_map(&self, threshold_quantile: f64) -> PyResult<PyVolume> {
        transform::motion_distance_map(&self.inner, threshold_quantile)
            .map(|inner| PyVolume { inner })
            .map_err(to_py_err)
    }

    fn endpoint_error(&self, truth: &PyField) -> PyResult<f64> {
        metrics::endpoint_error(&self.inner, &truth.inner).map_err(to_py_err)
    }
}

/// One u8 class label per voxel.
#[pyclass(name = "Mask")]
#[derive(Clone)]
struct PyMask {
    inner: LabelMask,
}

#[pymethods]
impl PyMask {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        volume::load_mask(&path)
            .map(|inner| PyMask { inner })
            .map_err(to_py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::save_mask(&self.inner, &path).map_err(to_py_err)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        (self.inner.dims.nx, self.inner.dims.ny, self.inner.dims.nz)
    }

    #[getter]
    fn num_classes(&self) -> u8 {
        self.inner.num_classes
    }

    fn count(&self, label: u8) -> usize {
        self.inner.count(label)
    }

    #[pyo3(signature = (other, class_id = 1))]
    fn dice(&self, other: &PyMask, class_id: u8) -> PyResult<f64> {
        metrics::dice(&self.inner, &other.inner, class_id).map_err(to_py_err)
    }

    #[pyo3(signature = (other, class_id = 1))]
    fn jaccard(&self, other: &PyMask, class_id: u8) -> PyResult<f64> {
        metrics::jaccard(&self.inner, &other.inner, class_id).map_err(to_py_err)
    }

    #[pyo3(signature = (other, class_id = 1))]
    fn hausdorff(&self, other: &PyMask, class_id: u8) -> PyResult<f64> {
        metrics::hausdorff(&self.inner, &other.inner, class_id).map_err(to_py_err)
    }
}

/// Trilinear backward warp: `out(p) = image(p + field(p))`.
#[pyfunction]
fn warp(image: &PyVolume, field: &PyField) -> PyResult<PyVolume> {
    transform::warp_volume(&image.inner, &field.inner)
        .map(|inner| PyVolume { inner })
        .map_err(to_py_err)
}

/// Generate a phantom study corpus; returns the study directories.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, studies = 1, dims = 48, time_points = 10, jitter = false))]
fn phantom_generate(
    out_dir: PathBuf,
    seed: u64,
    studies: usize,
    dims: usize,
    time_points: usize,
    jitter: bool,
) -> PyResult<Vec<String>> {
    let mut dirs = Vec::with_capacity(studies);
    for i in 0..studies {
        let spec = corpus_spec([dims, dims, dims], time_points, seed, i, jitter);
        let seq = generate(&spec).map_err(to_py_err)?;
        let dir = out_dir.join(format!("study_{i:02}"));
        export_study(&seq, &dir).map_err(to_py_err)?;
        dirs.push(dir.to_string_lossy().to_string());
    }
    Ok(dirs)
}

/// Train the motion estimator from a JSON config file; returns the checkpoint
/// path.
#[pyfunction]
fn train_motion(config_path: PathBuf, out_dir: PathBuf) -> PyResult<String> {
    let cfg = TrainConfig::load(&config_path).map_err(to_py_err)?;
    let studies = pipeline::load_studies(&cfg).map_err(to_py_err)?;
    let outcome = core_train_motion(&cfg, &studies, &out_dir).map_err(to_py_err)?;
    Ok(outcome.checkpoint.to_string_lossy().to_string())
}

/// Train the segmentation network on a frozen motion checkpoint.
#[pyfunction]
fn train_segmentation(
    config_path: PathBuf,
    motion_ckpt: PathBuf,
    out_dir: PathBuf,
) -> PyResult<String> {
    let cfg = TrainConfig::load(&config_path).map_err(to_py_err)?;
    let (motion, _) = MotionNet::load(&motion_ckpt).map_err(to_py_err)?;
    let studies = pipeline::load_studies(&cfg).map_err(to_py_err)?;
    let outcome = core_train_segmentation(&cfg, &motion, &studies, &out_dir).map_err(to_py_err)?;
    Ok(outcome.checkpoint.to_string_lossy().to_string())
}

/// Segment one phase of a study; returns the predicted mask.
#[pyfunction]
#[pyo3(signature = (motion_ckpt, seg_ckpt, study, phase, direction = "both"))]
fn infer(
    motion_ckpt: PathBuf,
    seg_ckpt: PathBuf,
    study: PathBuf,
    phase: usize,
    direction: &str,
) -> PyResult<PyMask> {
    let (motion, _) = MotionNet::load(&motion_ckpt).map_err(to_py_err)?;
    let (seg, cfg) = SegNet::load(&seg_ckpt).map_err(to_py_err)?;
    let study = load_study(Path::new(&study), &cfg).map_err(to_py_err)?;
    let outcome = match direction {
        "both" => pipeline::infer_bidirectional(&motion, &seg, &study, phase, &cfg),
        "past" => pipeline::infer_single(&motion, &seg, &study, phase, Direction::Past, &cfg),
        "future" => pipeline::infer_single(&motion, &seg, &study, phase, Direction::Future, &cfg),
        other => {
            return Err(PyValueError::new_err(format!(
                "direction must be both, past or future, got {other}"
            )))
        }
    }
    .map_err(to_py_err)?;
    Ok(PyMask {
        inner: outcome.mask,
    })
}

#[pymodule]
fn sscardiac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyMask>()?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(phantom_generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_motion, m)?)?;
    m.add_function(wrap_pyfunction!(train_segmentation, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    Ok(())
}
