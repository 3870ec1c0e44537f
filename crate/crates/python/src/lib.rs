//! Python bindings. The extension module is named `rate_alloc`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rate_alloc::allocation;
use rate_alloc::analysis;
use rate_alloc::imaging;
use rate_alloc::kl_solver;
use rate_alloc::multistage::{self, BoundsPredictor, EnergyPredictor, OraclePredictor};
use rate_alloc::sensing;
use rate_alloc::synthetic::SyntheticKind;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(runtime_err)
}

/// Grayscale image with intensities in [0, 1], row-major.
#[pyclass(name = "Image", module = "rate_alloc", frozen)]
struct PyImage {
    inner: imaging::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, pixels: Vec<f64>) -> PyResult<Self> {
        let inner = imaging::Image::new(height, width, pixels).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_pgm(path: std::path::PathBuf) -> PyResult<Self> {
        let inner = imaging::load_pgm(&path).map_err(|e| match e {
            imaging::PgmError::Io { .. } => pyo3::exceptions::PyOSError::new_err(e.to_string()),
            _ => value_err(e),
        })?;
        Ok(Self { inner })
    }

    /// Built-in 3x3-block test image: "flat", "checker-block" or "gradient".
    #[staticmethod]
    #[pyo3(signature = (kind, block_size=32))]
    fn synthetic(kind: &str, block_size: usize) -> PyResult<Self> {
        if block_size < 2 {
            return Err(value_err(format!("block size must be at least 2, got {block_size}")));
        }
        let kind: SyntheticKind = kind.parse().map_err(PyValueError::new_err)?;
        Ok(Self { inner: kind.render(block_size) })
    }

    fn save_pgm(&self, path: std::path::PathBuf) -> PyResult<()> {
        imaging::save_pgm(&self.inner, path).map_err(runtime_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn pixels(&self) -> Vec<f64> {
        self.inner.pixels().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Rate/sparsity curve `p_s = b ln(a (s_r - s_r1) + 1) + p_s1`.
#[pyclass(name = "CurveParams", module = "rate_alloc", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyCurve {
    inner: analysis::CurveParams,
}

#[pymethods]
impl PyCurve {
    #[new]
    #[pyo3(signature = (a=78.77, b=0.0444, s_r1=0.01, p_s1=0.005))]
    fn new(a: f64, b: f64, s_r1: f64, p_s1: f64) -> PyResult<Self> {
        let inner = analysis::CurveParams::new(a, b, s_r1, p_s1).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn a(&self) -> f64 {
        self.inner.a
    }

    #[getter]
    fn b(&self) -> f64 {
        self.inner.b
    }

    #[getter]
    fn s_r1(&self) -> f64 {
        self.inner.s_r1
    }

    #[getter]
    fn p_s1(&self) -> f64 {
        self.inner.p_s1
    }

    fn target_sparsity_ratio(&self, rate: f64) -> PyResult<f64> {
        analysis::target_sparsity_ratio(rate, &self.inner).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        let c = self.inner;
        format!("CurveParams(a={}, b={}, s_r1={}, p_s1={})", c.a, c.b, c.s_r1, c.p_s1)
    }
}

fn curve_or_default(curve: Option<PyCurve>) -> analysis::CurveParams {
    curve.map(|c| c.inner).unwrap_or_default()
}

/// Threshold analysis of one image at one rate.
#[pyclass(name = "Analysis", module = "rate_alloc", frozen, get_all)]
struct PyAnalysis {
    rate: f64,
    target_ratio: f64,
    threshold: f64,
    overall_ratio: f64,
    per_block_k: Vec<usize>,
    per_block_m: Vec<f64>,
    rows: usize,
    cols: usize,
}

#[pyfunction]
#[pyo3(signature = (image, rate, block_size=32, curve=None))]
fn analyze(image: &PyImage, rate: f64, block_size: usize, curve: Option<PyCurve>) -> PyResult<PyAnalysis> {
    let grid = imaging::partition(&image.inner, block_size).map_err(value_err)?;
    let coeffs = imaging::grid_coefficients(&grid);
    let a = analysis::analyze(&coeffs, rate, &curve_or_default(curve)).map_err(value_err)?;
    Ok(PyAnalysis {
        rate,
        target_ratio: a.target_ratio,
        threshold: a.sparsity.threshold,
        overall_ratio: a.sparsity.overall_ratio,
        per_block_k: a.sparsity.per_block_k,
        per_block_m: a.bounds.per_block_m,
        rows: grid.rows,
        cols: grid.cols,
    })
}

/// `k log10(n / k)` with `k` clamped to `floor(n / e)`.
#[pyfunction]
fn measurement_bounds(k: usize, n: usize) -> f64 {
    analysis::measurement_bounds(k, n)
}

/// Integer apportionment of `budget` by `shares` with a per-entry cap.
#[pyfunction]
fn apportion(shares: Vec<f64>, budget: u64, cap: u64) -> PyResult<Vec<u64>> {
    allocation::apportion(&shares, budget, cap).map_err(value_err)
}

#[pyclass(name = "AllocationPlan", module = "rate_alloc", frozen)]
struct PyPlan {
    inner: allocation::AllocationPlan,
}

#[pymethods]
impl PyPlan {
    #[getter]
    fn per_block_m(&self) -> Vec<u64> {
        self.inner.per_block_m.clone()
    }

    #[getter]
    fn total_budget(&self) -> u64 {
        self.inner.total_budget
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.inner.eta
    }

    #[getter]
    fn threshold(&self) -> Option<f64> {
        self.inner.threshold
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    fn total(&self) -> u64 {
        self.inner.total()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }

    /// Samples `image` with the plan's counts and returns the clamped
    /// adjoint reconstruction.
    fn reconstruct(&self, py: Python<'_>, image: &PyImage, matrix: &PyMatrix) -> PyResult<PyImage> {
        let (img, plan, m) = (&image.inner, &self.inner, &matrix.inner);
        let inner = py
            .detach(|| {
                let records = sensing::sample_plan(img, plan, m)?;
                sensing::reconstruct_plan(plan, &records, m, img.height(), img.width())
            })
            .map_err(value_err)?;
        Ok(PyImage { inner })
    }

    fn __repr__(&self) -> String {
        format!("AllocationPlan(total={}, blocks={})", self.inner.total(), self.inner.per_block_m.len())
    }
}

#[pyfunction]
#[pyo3(signature = (image, rate, block_size=32))]
fn uniform_plan(image: &PyImage, rate: f64, block_size: usize) -> PyResult<PyPlan> {
    let inner = allocation::uniform_plan(&image.inner, block_size, rate).map_err(value_err)?;
    Ok(PyPlan { inner })
}

#[pyfunction]
#[pyo3(signature = (image, rate, block_size=32, curve=None))]
fn single_stage_plan(image: &PyImage, rate: f64, block_size: usize, curve: Option<PyCurve>) -> PyResult<PyPlan> {
    let inner = allocation::single_stage_plan(&image.inner, block_size, rate, &curve_or_default(curve))
        .map_err(value_err)?;
    Ok(PyPlan { inner })
}

/// `min KL(p || alpha q + beta r)` over `sum q = 1`, `0 <= q <= a`.
#[pyclass(name = "KlAllocProblem", module = "rate_alloc", frozen)]
struct PyProblem {
    inner: kl_solver::KlAllocProblem,
}

#[pyclass(name = "KlAllocSolution", module = "rate_alloc", frozen, get_all)]
struct PySolution {
    q: Vec<f64>,
    mu: f64,
    status: String,
    iterations: usize,
    newton_steps: usize,
}

impl From<kl_solver::KlAllocSolution> for PySolution {
    fn from(s: kl_solver::KlAllocSolution) -> Self {
        Self {
            iterations: s.iterations(),
            newton_steps: s.newton_steps(),
            status: s.status.as_str().to_string(),
            mu: s.mu_star,
            q: s.q,
        }
    }
}

#[pymethods]
impl PySolution {
    fn __repr__(&self) -> String {
        format!("KlAllocSolution(mu={}, status={:?}, iterations={})", self.mu, self.status, self.iterations)
    }
}

#[pymethods]
impl PyProblem {
    #[new]
    fn new(p: Vec<f64>, r: Vec<f64>, alpha: f64, a: Vec<f64>) -> PyResult<Self> {
        let inner = kl_solver::KlAllocProblem::new(&p, &r, alpha, &a).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let spec: kl_solver::ProblemSpec = serde_json::from_str(text).map_err(value_err)?;
        let inner = kl_solver::KlAllocProblem::try_from(&spec).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn q_of_mu(&self, mu: f64) -> Vec<f64> {
        self.inner.q_of_mu(mu)
    }

    #[pyo3(name = "q_value")]
    fn q_value(&self, mu: f64) -> f64 {
        self.inner.Q_value(mu)
    }

    fn solve(&self) -> PyResult<PySolution> {
        kl_solver::solve(&self.inner).map(Into::into).map_err(value_err)
    }

    /// Pure bisection reference solver.
    fn oracle_solve(&self) -> PyResult<PySolution> {
        kl_solver::oracle_solve(&self.inner).map(Into::into).map_err(value_err)
    }

    fn objective(&self, q: Vec<f64>) -> PyResult<f64> {
        kl_solver::objective(&self.inner, &q).map_err(value_err)
    }

    fn kkt_residual(&self, q: Vec<f64>, mu: f64) -> f64 {
        kl_solver::kkt_residual(&self.inner, &q, mu)
    }
}

/// Seeded `B^2 x B^2` orthonormal measurement operator.
#[pyclass(name = "MeasurementMatrix", module = "rate_alloc", frozen)]
struct PyMatrix {
    inner: sensing::MeasurementMatrix,
}

#[pymethods]
impl PyMatrix {
    #[staticmethod]
    #[pyo3(signature = (block_size, seed=0))]
    fn build(py: Python<'_>, block_size: usize, seed: u64) -> PyResult<Self> {
        let inner = py.detach(|| sensing::build_matrix(block_size, seed)).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read_dump(path: std::path::PathBuf) -> PyResult<Self> {
        let inner = sensing::MeasurementMatrix::read_dump(path).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn write_dump(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.write_dump(path).map_err(runtime_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Seed actually used, after any rank-deficiency retries.
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    /// Row `index`, 1-based.
    fn row(&self, index: usize) -> PyResult<Vec<f64>> {
        if index == 0 || index > self.inner.dim() {
            return Err(value_err(format!("row {index} outside 1..={}", self.inner.dim())));
        }
        Ok(self.inner.row(index).to_vec())
    }

    fn orthonormality_error(&self, py: Python<'_>) -> f64 {
        py.detach(|| self.inner.orthonormality_error())
    }
}

#[pyclass(name = "MultiStagePlan", module = "rate_alloc", frozen)]
struct PyMultiStage {
    inner: multistage::MultiStagePlan,
}

#[pymethods]
impl PyMultiStage {
    #[getter]
    fn final_m(&self) -> Vec<u64> {
        self.inner.final_m.clone()
    }

    #[getter]
    fn stage_m(&self) -> Vec<Vec<u64>> {
        self.inner.stages.iter().map(|s| s.stage_m.clone()).collect()
    }

    #[getter]
    fn true_bounds(&self) -> Vec<f64> {
        self.inner.true_bounds.clone()
    }

    #[getter]
    fn final_kl(&self) -> f64 {
        self.inner.final_kl
    }

    fn total(&self) -> u64 {
        self.inner.total()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }

    /// Clamped adjoint reconstruction cropped to `height x width`.
    fn reconstruct(&self, matrix: &PyMatrix, height: usize, width: usize) -> PyResult<PyImage> {
        let inner = self.inner.reconstruct(&matrix.inner, height, width).map_err(value_err)?;
        Ok(PyImage { inner })
    }
}

#[pyfunction]
#[pyo3(signature = (image, rate, matrix, stages=2, predictor="oracle", block_size=32, curve=None))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    image: &PyImage,
    rate: f64,
    matrix: &PyMatrix,
    stages: usize,
    predictor: &str,
    block_size: usize,
    curve: Option<PyCurve>,
) -> PyResult<PyMultiStage> {
    let pred: &dyn BoundsPredictor = match predictor {
        "oracle" => &OraclePredictor,
        "energy" => &EnergyPredictor,
        other => return Err(value_err(format!("unknown predictor '{other}' (expected oracle or energy)"))),
    };
    let curve = curve_or_default(curve);
    let (img, m) = (&image.inner, &matrix.inner);
    let inner = py
        .detach(|| multistage::run_simulation(img, block_size, rate, stages, pred, m, &curve))
        .map_err(value_err)?;
    Ok(PyMultiStage { inner })
}

/// PSNR in dB with peak 1; `inf` for identical images.
#[pyfunction]
fn psnr(reference: &PyImage, estimate: &PyImage) -> PyResult<f64> {
    sensing::psnr(&reference.inner, &estimate.inner).map_err(value_err)
}

#[pymodule]
#[pyo3(name = "rate_alloc")]
fn rate_alloc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyCurve>()?;
    m.add_class::<PyAnalysis>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PySolution>()?;
    m.add_class::<PyMatrix>()?;
    m.add_class::<PyMultiStage>()?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(measurement_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(apportion, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_plan, m)?)?;
    m.add_function(wrap_pyfunction!(single_stage_plan, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    Ok(())
}
