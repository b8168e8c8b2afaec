//! Python bindings. Arrays cross the boundary as 2-D float64 NumPy arrays.

use std::path::PathBuf;

use ndarray::Array2;
use numpy::{PyArray1, PyArray2, PyArrayMethods, PyReadonlyArray2, PyUntypedArrayMethods};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use phd_core::geometry::{fbp_reconstruct, make_phantom, radon_forward};
use phd_core::hankel::{hankel_pinv, hankel_transform, SourceDims};
use phd_core::io::{self, ScheduleSpec};
use phd_core::lowrank::svd_hard_threshold;
use phd_core::noise::{pwls_weights, simulate_low_dose, DEFAULT_ETA};
use phd_core::sampler::reconstruct_with;
use phd_core::score::{make_schedule, train};
use phd_core::tv::{tv_norm, tv_step};
use phd_core::{
    metrics, DoseSpec, Error, FanGeometry, FilterKind, HankelMatrix, Image, PhantomKind, RankSpec, ReconConfig,
    ScoreModel, Sinogram, TrainConfig, TvSpec,
};

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

// numpy pins its own ndarray version, so arrays are copied element-wise
fn owned(a: &PyReadonlyArray2<f64>) -> Array2<f64> {
    let [rows, cols] = [a.shape()[0], a.shape()[1]];
    let values: Vec<f64> = a.as_array().iter().copied().collect();
    Array2::from_shape_vec((rows, cols), values).expect("shape matches length")
}

fn sinogram(a: &PyReadonlyArray2<f64>) -> PyResult<Sinogram> {
    Sinogram::from_array(owned(a)).map_err(err)
}

fn to_py<'py>(py: Python<'py>, a: Array2<f64>) -> Bound<'py, PyArray2<f64>> {
    let (rows, cols) = a.dim();
    let values: Vec<f64> = a.iter().copied().collect();
    PyArray1::from_vec(py, values).reshape([rows, cols]).expect("shape matches length")
}

/// Fan-beam acquisition geometry with a flat detector.
#[pyclass(name = "FanGeometry")]
#[derive(Clone)]
struct PyGeometry(FanGeometry);

#[pymethods]
impl PyGeometry {
    /// Named preset: "clinical", "square768" or "desk".
    #[new]
    #[pyo3(signature = (preset = "desk", image_size = None, num_views = None, num_detectors = None))]
    fn new(preset: &str, image_size: Option<usize>, num_views: Option<usize>, num_detectors: Option<usize>) -> PyResult<Self> {
        let mut g = match (preset, image_size) {
            ("desk", Some(n)) => FanGeometry::desk(n),
            _ => FanGeometry::preset(preset).map_err(err)?,
        };
        if let Some(n) = image_size {
            g.pixel_spacing *= g.image_size as f64 / n as f64;
            g.image_size = n;
        }
        if let Some(v) = num_views {
            g.num_views = v;
        }
        if let Some(d) = num_detectors {
            g.num_detectors = d;
        }
        g.validate().map_err(err)?;
        Ok(Self(g))
    }

    #[getter]
    fn num_views(&self) -> usize {
        self.0.num_views
    }

    #[getter]
    fn num_detectors(&self) -> usize {
        self.0.num_detectors
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.0.image_size
    }

    #[getter]
    fn pixel_spacing(&self) -> f64 {
        self.0.pixel_spacing
    }

    fn __repr__(&self) -> String {
        format!(
            "FanGeometry(views={}, detectors={}, image_size={}, pixel_spacing={})",
            self.0.num_views, self.0.num_detectors, self.0.image_size, self.0.pixel_spacing
        )
    }
}

/// The three partition score models.
#[pyclass(name = "ScoreModels")]
#[derive(Clone)]
struct PyModels(Vec<ScoreModel>);

#[pymethods]
impl PyModels {
    /// Loads `partition{0,1,2}` checkpoints from a directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        io::load_models(&dir).map(Self).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        io::save_models(&dir, &self.0).map_err(err)
    }

    /// Analytic Gaussian models centred on the Hankel partitions of `mean`.
    #[staticmethod]
    #[pyo3(signature = (mean, variance, levels = 10, sigma_min = 0.002, sigma_max = 0.05, window = 8, patch_rows = 64))]
    fn gaussian(
        mean: PyReadonlyArray2<f64>,
        variance: f64,
        levels: usize,
        sigma_min: f64,
        sigma_max: f64,
        window: usize,
        patch_rows: usize,
    ) -> PyResult<Self> {
        let schedule = make_schedule(levels, sigma_min, sigma_max).map_err(err)?;
        ScoreModel::gaussian_triplet(&sinogram(&mean)?, variance, &schedule, window, patch_rows)
            .map(Self)
            .map_err(err)
    }

    /// Normalisation scale applied to sinograms before scoring.
    #[getter]
    fn scale(&self) -> f64 {
        self.0[0].scale()
    }

    #[getter]
    fn patch_shape(&self) -> (usize, usize) {
        self.0[0].patch_shape()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
#[pyo3(signature = (size, kind = "shepp-logan", value = 1.0, radius = None))]
fn phantom<'py>(py: Python<'py>, size: usize, kind: &str, value: f64, radius: Option<f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let kind = PhantomKind::parse(kind, value, radius, size).map_err(err)?;
    Ok(to_py(py, make_phantom(size, kind).map_err(err)?.into_array()))
}

/// Line integrals of `image` (attenuation per cm) over every ray.
#[pyfunction]
fn project<'py>(py: Python<'py>, image: PyReadonlyArray2<f64>, geometry: &PyGeometry) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let img = Image::from_array(owned(&image)).map_err(err)?;
    Ok(to_py(py, radon_forward(&img, &geometry.0).map_err(err)?.into_array()))
}

#[pyfunction]
#[pyo3(signature = (sinogram, geometry, filter = "ram-lak"))]
fn fbp<'py>(
    py: Python<'py>,
    sinogram: PyReadonlyArray2<f64>,
    geometry: &PyGeometry,
    filter: &str,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let filter = FilterKind::parse(filter).map_err(err)?;
    let s = self::sinogram(&sinogram)?;
    Ok(to_py(py, fbp_reconstruct(&s, &geometry.0, filter).map_err(err)?.into_array()))
}

/// Poisson low-dose measurement of the line integrals.
#[pyfunction]
#[pyo3(signature = (sinogram, intensity = 1e5, seed = 0, background = 0.0))]
fn low_dose<'py>(
    py: Python<'py>,
    sinogram: PyReadonlyArray2<f64>,
    intensity: f64,
    seed: u64,
    background: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let dose = DoseSpec { source_intensity: intensity, background, seed };
    let y = simulate_low_dose(&self::sinogram(&sinogram)?, &dose).map_err(err)?;
    Ok(to_py(py, y.into_array()))
}

#[pyfunction]
#[pyo3(signature = (sinogram, window = 8))]
fn hankel<'py>(py: Python<'py>, sinogram: PyReadonlyArray2<f64>, window: usize) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let h = hankel_transform(&self::sinogram(&sinogram)?, window).map_err(err)?;
    Ok(to_py(py, h.into_array()))
}

/// Least-squares sinogram of shape `(rows, cols)` for a Hankel matrix.
#[pyfunction]
fn hankel_inverse<'py>(
    py: Python<'py>,
    matrix: PyReadonlyArray2<f64>,
    rows: usize,
    cols: usize,
    window: usize,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let src = SourceDims::new(rows, cols, window).map_err(err)?;
    let h = HankelMatrix::from_parts(owned(&matrix), src).map_err(err)?;
    Ok(to_py(py, hankel_pinv(&h).map_err(err)?.into_array()))
}

#[pyfunction]
fn low_rank<'py>(py: Python<'py>, matrix: PyReadonlyArray2<f64>, rank: usize) -> PyResult<Bound<'py, PyArray2<f64>>> {
    Ok(to_py(py, svd_hard_threshold(owned(&matrix).view(), rank).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (x, eps = 1e-6))]
fn total_variation(x: PyReadonlyArray2<f64>, eps: f64) -> f64 {
    tv_norm(owned(&x).view(), eps)
}

#[pyfunction]
#[pyo3(signature = (previous, current, alpha = 0.2, iters = 2, epsilon = 1e-6))]
fn tv_descent<'py>(
    py: Python<'py>,
    previous: PyReadonlyArray2<f64>,
    current: PyReadonlyArray2<f64>,
    alpha: f64,
    iters: usize,
    epsilon: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let spec = TvSpec { alpha, iters, epsilon };
    let out = tv_step(&sinogram(&previous)?, &sinogram(&current)?, &spec).map_err(err)?;
    Ok(to_py(py, out.into_array()))
}

/// Trains the partition models on one or more normal-dose sinograms.
/// Returns the models and the per-step losses of each partition.
#[pyfunction]
#[pyo3(signature = (shots, steps = 2000, batch_size = 8, hidden = 512, learning_rate = 1e-3, seed = 0, window = 8, patch_rows = 64, levels = 10, sigma_min = 0.002, sigma_max = 0.05))]
#[allow(clippy::too_many_arguments)]
fn train_models(
    py: Python<'_>,
    shots: Vec<PyReadonlyArray2<f64>>,
    steps: usize,
    batch_size: usize,
    hidden: usize,
    learning_rate: f64,
    seed: u64,
    window: usize,
    patch_rows: usize,
    levels: usize,
    sigma_min: f64,
    sigma_max: f64,
) -> PyResult<(PyModels, Vec<Vec<f64>>)> {
    let shots = shots.iter().map(sinogram).collect::<PyResult<Vec<_>>>()?;
    let cfg = TrainConfig {
        learning_rate,
        batch_size,
        steps,
        seed,
        window,
        patch_rows,
        hidden,
        ..TrainConfig::default()
    };
    let schedule = ScheduleSpec { levels, sigma_min, sigma_max }.build().map_err(err)?;
    let trained = py.allow_threads(|| train(&shots, &cfg, &schedule)).map_err(err)?;
    Ok((PyModels(trained.models), trained.losses))
}

type Restored<'py> = (Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>, Vec<(usize, f64)>);

/// Restores a low-dose sinogram. Returns the sinogram, its FBP image and
/// the per-iteration `(iteration, sigma)` trace.
#[pyfunction]
#[pyo3(signature = (measurement, models, geometry, intensity = 1e5, iterations = 10, corrector_steps = 2, rank = 38, lambda_dc = 1.0, tv_alpha = 0.2, snr = 0.16, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn reconstruct<'py>(
    py: Python<'py>,
    measurement: PyReadonlyArray2<f64>,
    models: &PyModels,
    geometry: &PyGeometry,
    intensity: f64,
    iterations: usize,
    corrector_steps: usize,
    rank: usize,
    lambda_dc: f64,
    tv_alpha: f64,
    snr: f64,
    seed: u64,
) -> PyResult<Restored<'py>> {
    let y = sinogram(&measurement)?;
    let dose = DoseSpec::new(intensity, seed);
    let weights = pwls_weights(&y, &dose, DEFAULT_ETA).map_err(err)?;
    let cfg = ReconConfig {
        iterations,
        corrector_steps,
        rank: RankSpec { rank, ..RankSpec::default() },
        tv: TvSpec { alpha: tv_alpha, ..TvSpec::default() },
        lambda_dc,
        corrector_snr: snr,
        seed,
        ..ReconConfig::default()
    };
    let mut trace = Vec::new();
    let (x, img) = py
        .allow_threads(|| {
            reconstruct_with(&y, &models.0, &weights, &geometry.0, &cfg, |r| trace.push((r.iteration, r.sigma)))
        })
        .map_err(err)?;
    Ok((to_py(py, x.into_array()), to_py(py, img.into_array()), trace))
}

#[pyfunction]
fn psnr(reference: PyReadonlyArray2<f64>, test: PyReadonlyArray2<f64>) -> PyResult<f64> {
    metrics::psnr(owned(&reference).view(), owned(&test).view()).map_err(err)
}

#[pyfunction]
fn ssim(reference: PyReadonlyArray2<f64>, test: PyReadonlyArray2<f64>) -> PyResult<f64> {
    metrics::ssim(owned(&reference).view(), owned(&test).view()).map_err(err)
}

/// PSNR, SSIM and MSE in one dictionary.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    reference: PyReadonlyArray2<f64>,
    test: PyReadonlyArray2<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let report = metrics::MetricReport::compute(owned(&reference).view(), owned(&test).view()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("psnr", report.psnr)?;
    d.set_item("ssim", report.ssim)?;
    d.set_item("mse", report.mse)?;
    Ok(d)
}

#[pymodule]
fn phd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGeometry>()?;
    m.add_class::<PyModels>()?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(fbp, m)?)?;
    m.add_function(wrap_pyfunction!(low_dose, m)?)?;
    m.add_function(wrap_pyfunction!(hankel, m)?)?;
    m.add_function(wrap_pyfunction!(hankel_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(low_rank, m)?)?;
    m.add_function(wrap_pyfunction!(total_variation, m)?)?;
    m.add_function(wrap_pyfunction!(tv_descent, m)?)?;
    m.add_function(wrap_pyfunction!(train_models, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
