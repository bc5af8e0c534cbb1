//! Python bindings for the renderer, losses, evaluation and inference.

use std::path::PathBuf;

use avatarfit::evalkit::{fit_descriptor_pipeline, reconstruct as reconstruct_image, VerificationPair};
use avatarfit::objectives::{identity_view_queries, loss_contrastive, mmd_sq_values, ContrastiveQuery, KernelSpec};
use avatarfit::procgen::{self, MaskRegion, ParamVector};
use avatarfit::tensor::{Graph, Tensor};
use avatarfit::trainer::{load_imitator, load_perception};
use avatarfit::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor<f32>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_f64(&[rows.len(), d], &flat).map_err(py_err)
}

/// An RGB image with channel-major float data in [0, 1].
#[pyclass(name = "Image", module = "avatarfit_py")]
#[derive(Clone)]
pub struct PyImage {
    inner: procgen::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: procgen::Image::new(height, width, data).map_err(py_err)?,
        })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Flat `[3, H, W]` data.
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn get(&self, c: usize, y: usize, x: usize) -> PyResult<f32> {
        if c >= 3 || y >= self.inner.height() || x >= self.inner.width() {
            return Err(PyValueError::new_err("pixel index out of range"));
        }
        Ok(self.inner.get(c, y, x))
    }

    fn mse(&self, other: &PyImage) -> f64 {
        self.inner.mse(&other.inner)
    }

    fn to_ppm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &procgen::encode_ppm(&self.inner))
    }

    #[staticmethod]
    fn from_ppm(bytes: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: procgen::decode_ppm(bytes).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Random parameter vector for `seed`: identity part in ±2.5, nuisance part in ±1.
#[pyfunction]
fn sample_params(seed: u64) -> Vec<f32> {
    procgen::sample_params(seed).values().to_vec()
}

#[pyfunction]
#[pyo3(signature = (params, size = 64))]
fn render_engine(params: Vec<f32>, size: usize) -> PyResult<PyImage> {
    let p = ParamVector::new(params).map_err(py_err)?;
    Ok(PyImage {
        inner: procgen::render_engine(&p, size).map_err(py_err)?,
    })
}

/// `region` is one of "upper", "middle", "lower", "none".
#[pyfunction]
fn mask_region(image: &PyImage, region: &str) -> PyResult<PyImage> {
    let r = match region.to_ascii_lowercase().as_str() {
        "upper" => MaskRegion::Upper,
        "middle" => MaskRegion::Middle,
        "lower" => MaskRegion::Lower,
        "none" => MaskRegion::None,
        other => return Err(PyValueError::new_err(format!("unknown region `{other}`"))),
    };
    Ok(PyImage {
        inner: procgen::mask_region(&image.inner, r),
    })
}

/// Biased squared MMD between two row sets. Without `bandwidths` the
/// median heuristic picks the Gaussian width.
#[pyfunction]
#[pyo3(signature = (x, y, bandwidths = None))]
fn mmd_sq(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, bandwidths: Option<Vec<f64>>) -> PyResult<f64> {
    let kernel = match bandwidths {
        Some(b) => KernelSpec::fixed(&b),
        None => KernelSpec::median(),
    };
    mmd_sq_values(&rows_tensor(&x)?, &rows_tensor(&y)?, &kernel).map_err(py_err)
}

/// InfoNCE over `rows`. `queries` holds `(query, positive, negatives)` row
/// indices; when omitted, rows are taken as identity-major view pairs.
#[pyfunction]
#[pyo3(signature = (rows, tau = 0.1, queries = None, normalize = false))]
fn contrastive_loss(rows: Vec<Vec<f64>>, tau: f64, queries: Option<Vec<(usize, usize, Vec<usize>)>>, normalize: bool) -> PyResult<f64> {
    let queries = match queries {
        Some(q) => q
            .into_iter()
            .map(|(query, positive, negatives)| ContrastiveQuery {
                query,
                positive,
                negatives,
            })
            .collect(),
        None => {
            if rows.len() % 2 != 0 {
                return Err(PyValueError::new_err("view pairs need an even number of rows"));
            }
            identity_view_queries(rows.len() / 2).map_err(py_err)?
        }
    };
    if queries.iter().any(|q| q.query >= rows.len() || q.positive >= rows.len() || q.negatives.iter().any(|&n| n >= rows.len())) {
        return Err(PyValueError::new_err("query index out of range"));
    }
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let mut g = Graph::<f64>::new();
    let p = g.input(Tensor::from_f64(&[rows.len(), d], &flat).map_err(py_err)?).map_err(py_err)?;
    let loss = loss_contrastive(&mut g, p, &queries, tau, normalize).map_err(py_err)?;
    Ok(g.value(loss).item())
}

/// Fits the descriptor pipeline on `fit_rows`, picks a threshold on `fit`
/// pairs and returns `(accuracy, threshold)` on `test` pairs. Pairs are
/// `(a, b, same)`.
#[pyfunction]
fn verification_accuracy(
    fit_rows: Vec<Vec<f64>>,
    fit: Vec<(Vec<f64>, Vec<f64>, bool)>,
    test: Vec<(Vec<f64>, Vec<f64>, bool)>,
) -> PyResult<(f64, f64)> {
    let pipeline = fit_descriptor_pipeline(&fit_rows, "python").map_err(py_err)?;
    let pairs = |v: Vec<(Vec<f64>, Vec<f64>, bool)>| -> Vec<VerificationPair> {
        v.into_iter().map(|(a, b, same)| VerificationPair { a, b, same }).collect()
    };
    let r = avatarfit::evalkit::verification_accuracy(&pairs(fit), &pairs(test), &pipeline).map_err(py_err)?;
    Ok((r.accuracy, r.threshold))
}

/// Loads both checkpoints, regresses `image` and returns
/// `(params, engine_render, imitator_render)`.
#[pyfunction]
fn reconstruct(perception: PathBuf, imitator: PathBuf, image: &PyImage) -> PyResult<(Vec<f32>, PyImage, PyImage)> {
    let (p, _) = load_perception(&perception).map_err(py_err)?;
    let imi = load_imitator(&imitator).map_err(py_err)?;
    let r = reconstruct_image(&p, &imi, &image.inner).map_err(py_err)?;
    Ok((r.params.values().to_vec(), PyImage { inner: r.engine }, PyImage { inner: r.imitated }))
}

#[pymodule]
fn avatarfit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add("PARAM_DIM", procgen::PARAM_DIM)?;
    m.add("PARAM_LIMIT", procgen::PARAM_LIMIT)?;
    m.add_function(wrap_pyfunction!(sample_params, m)?)?;
    m.add_function(wrap_pyfunction!(render_engine, m)?)?;
    m.add_function(wrap_pyfunction!(mask_region, m)?)?;
    m.add_function(wrap_pyfunction!(mmd_sq, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(verification_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    Ok(())
}
