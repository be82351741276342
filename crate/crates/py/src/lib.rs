//! Python bindings for the concept-bottleneck learning-coefficient toolkit.
//!
//! The module mirrors the core crate's public surface at smoke-test
//! granularity: exact rational learning coefficients, ground-truth and
//! dataset generation, the Langevin posterior sampler, generalization-error
//! and slope/two-temperature estimators, and the Monte-Carlo volume-scaling
//! oracle. Matrices cross the boundary as row-major nested lists.

use pcbm_slt::model::Weights;
use pcbm_slt::sampler::{InitStrategy, PriorKind, PriorSpec, ProposalKernel, SamplerConfig};
use pcbm_slt::{estimators, model, rlct, sampler, shape, volume};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: pcbm_slt::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Exact fraction `num/den` in lowest terms.
#[pyclass(frozen, name = "Rational", module = "pcbm_slt_py", from_py_object)]
#[derive(Clone, Copy, PartialEq, Eq)]
struct PyRational {
    #[pyo3(get)]
    num: i64,
    #[pyo3(get)]
    den: i64,
}

impl From<pcbm_slt::Rational> for PyRational {
    fn from(r: pcbm_slt::Rational) -> Self {
        PyRational {
            num: r.num(),
            den: r.den(),
        }
    }
}

#[pymethods]
impl PyRational {
    /// Decimal value of the fraction.
    #[getter]
    fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn __float__(&self) -> f64 {
        self.value()
    }

    fn __repr__(&self) -> String {
        if self.den == 1 {
            format!("Rational({})", self.num)
        } else {
            format!("Rational({}/{})", self.num, self.den)
        }
    }

    fn __eq__(&self, other: &Self) -> bool {
        self == other
    }
}

/// Partially supervised bottleneck shape `(n_in, h1, h2, m_out, r_prime)`.
#[pyclass(frozen, name = "Shape", module = "pcbm_slt_py", from_py_object)]
#[derive(Clone, Copy)]
struct PyShape(shape::PcbmShape);

#[pymethods]
impl PyShape {
    #[new]
    #[pyo3(signature = (n_in, h1, h2, m_out, r_prime = 0))]
    fn new(n_in: usize, h1: usize, h2: usize, m_out: usize, r_prime: usize) -> PyResult<Self> {
        shape::PcbmShape::new(n_in, h1, h2, m_out, r_prime)
            .map(PyShape)
            .map_err(err)
    }

    #[getter]
    fn n_in(&self) -> usize {
        self.0.n_in
    }
    #[getter]
    fn h1(&self) -> usize {
        self.0.h1
    }
    #[getter]
    fn h2(&self) -> usize {
        self.0.h2
    }
    #[getter]
    fn m_out(&self) -> usize {
        self.0.m_out
    }
    #[getter]
    fn r_prime(&self) -> usize {
        self.0.r_prime
    }

    #[getter]
    fn hidden_total(&self) -> usize {
        self.0.hidden_total()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id()
    }

    fn __repr__(&self) -> String {
        format!(
            "Shape(n_in={}, h1={}, h2={}, m_out={}, r_prime={})",
            self.0.n_in, self.0.h1, self.0.h2, self.0.m_out, self.0.r_prime
        )
    }
}

/// Generating weights with an exact-rank tacit block.
#[pyclass(frozen, name = "GroundTruth", module = "pcbm_slt_py")]
struct PyGroundTruth(model::GroundTruth);

#[pymethods]
impl PyGroundTruth {
    #[getter]
    fn shape(&self) -> PyShape {
        PyShape(*self.0.shape())
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.0.scale()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed()
    }

    /// Output-side matrix A0, row-major `m_out x (h1 + h2)`.
    fn a(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.0.weights().a())
    }

    /// Input-side matrix B0, row-major `(h1 + h2) x n_in`.
    fn b(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.0.weights().b())
    }
}

/// A sampled regression dataset `(x, y, c)`.
#[pyclass(frozen, name = "Dataset", module = "pcbm_slt_py")]
struct PyDataset(model::Dataset);

#[pymethods]
impl PyDataset {
    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed()
    }

    fn x(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.0.x())
    }

    fn y(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.0.y())
    }

    fn c(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.0.c())
    }
}

/// Pooled MCMC draws with convergence diagnostics.
#[pyclass(frozen, name = "PosteriorDraws", module = "pcbm_slt_py")]
struct PyPosteriorDraws(sampler::PosteriorDraws);

#[pymethods]
impl PyPosteriorDraws {
    #[getter]
    fn accept_rate(&self) -> f64 {
        self.0.accept_rate
    }

    #[getter]
    fn rhat_max(&self) -> f64 {
        self.0.rhat_max
    }

    #[getter]
    fn ess_min(&self) -> f64 {
        self.0.ess_min
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n
    }

    fn n_draws(&self) -> usize {
        self.0.n_draws()
    }

    /// Posterior mean of `n L_n` over all kept draws.
    fn mean_nll(&self) -> f64 {
        self.0.mean_nll()
    }
}

/// Monte-Carlo volume-scaling report.
#[pyclass(frozen, name = "VolumeReport", module = "pcbm_slt_py")]
struct PyVolumeReport(volume::VolumeScalingReport);

#[pymethods]
impl PyVolumeReport {
    #[getter]
    fn lambda_vol(&self) -> f64 {
        self.0.lambda_vol
    }

    #[getter]
    fn fit_r2(&self) -> f64 {
        self.0.fit_r2
    }

    #[getter]
    fn curvature_warning(&self) -> bool {
        self.0.curvature_warning
    }

    #[getter]
    fn thresholds(&self) -> Vec<f64> {
        self.0.thresholds.clone()
    }

    #[getter]
    fn log_volume(&self) -> Vec<f64> {
        self.0.log_volume.clone()
    }

    #[getter]
    fn hits(&self) -> Vec<u64> {
        self.0.hits.clone()
    }
}

#[pyfunction]
fn rlct_rrr(n_in: usize, h: usize, m_out: usize, r: usize) -> PyResult<PyRational> {
    let s = shape::RrrShape::new(n_in, h, m_out, r).map_err(err)?;
    Ok(rlct::rlct_rrr(&s).into())
}

#[pyfunction]
fn rlct_cbm(n_in: usize, h: usize, m_out: usize) -> PyResult<PyRational> {
    rlct::rlct_cbm(n_in, h, m_out).map(Into::into).map_err(err)
}

#[pyfunction]
fn rlct_pcbm_upper(shape: PyShape) -> PyRational {
    rlct::rlct_pcbm_upper(&shape.0).into()
}

#[pyfunction]
fn gen_error_gap_lower(shape: PyShape) -> PyRational {
    rlct::gen_error_gap_lower(&shape.0).into()
}

#[pyfunction]
#[pyo3(signature = (n_in, h1, h2_real, h2_cat, m_real, m_cat, r_prime = 0))]
fn rlct_pcbm_upper_categorical(
    n_in: usize,
    h1: usize,
    h2_real: usize,
    h2_cat: usize,
    m_real: usize,
    m_cat: usize,
    r_prime: usize,
) -> PyResult<PyRational> {
    let s = shape::CategoricalShape::new(n_in, h1, h2_real, h2_cat, m_real, m_cat, r_prime)
        .map_err(err)?;
    Ok(rlct::rlct_pcbm_upper_categorical(&s).into())
}

#[pyfunction]
#[pyo3(signature = (shape, scale = 1.0, seed = 0))]
fn make_ground_truth(shape: PyShape, scale: f64, seed: u64) -> PyResult<PyGroundTruth> {
    model::make_ground_truth(shape.0, scale, seed)
        .map(PyGroundTruth)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (truth, n, seed = 0))]
fn sample_dataset(truth: PyRef<'_, PyGroundTruth>, n: usize, seed: u64) -> PyResult<PyDataset> {
    model::sample_dataset(&truth.0, n, seed)
        .map(PyDataset)
        .map_err(err)
}

fn build_prior(kind: &str, sigma: f64, half_width: f64) -> PyResult<PriorSpec> {
    let kind = match kind {
        "gaussian" => PriorKind::Gaussian,
        "uniform_box" => PriorKind::UniformBox,
        other => {
            return Err(PyValueError::new_err(format!(
                "prior must be \"gaussian\" or \"uniform_box\", got {other:?}"
            )))
        }
    };
    Ok(PriorSpec {
        kind,
        sigma,
        half_width,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_sampler_config(
    n_chains: usize,
    n_steps: usize,
    burn_in: usize,
    thin: usize,
    step_size: f64,
    target_accept: f64,
    beta: f64,
    seed: u64,
    kernel: &str,
    init: &str,
) -> PyResult<SamplerConfig> {
    let kernel = match kernel {
        "mala" => ProposalKernel::Mala,
        "random_walk" => ProposalKernel::RandomWalk,
        other => {
            return Err(PyValueError::new_err(format!(
                "kernel must be \"mala\" or \"random_walk\", got {other:?}"
            )))
        }
    };
    let init = match init {
        "prior" => InitStrategy::Prior,
        "truth" => InitStrategy::Truth,
        other => {
            return Err(PyValueError::new_err(format!(
                "init must be \"prior\" or \"truth\", got {other:?}"
            )))
        }
    };
    Ok(SamplerConfig {
        n_chains,
        n_steps,
        burn_in,
        thin,
        step_size,
        adapt: true,
        target_accept,
        beta,
        seed,
        kernel,
        init,
    })
}

/// Run MCMC chains on the tempered posterior and pool the draws.
#[pyfunction]
#[pyo3(signature = (data, shape, truth = None, *, prior = "gaussian", sigma = 10.0,
    half_width = 20.0, n_chains = 2, n_steps = 2800, burn_in = 800, thin = 2,
    step_size = 0.05, target_accept = 0.574, beta = 1.0, seed = 0,
    kernel = "mala", init = "prior"))]
#[allow(clippy::too_many_arguments)]
fn run_chains(
    data: PyRef<'_, PyDataset>,
    shape: PyShape,
    truth: Option<PyRef<'_, PyGroundTruth>>,
    prior: &str,
    sigma: f64,
    half_width: f64,
    n_chains: usize,
    n_steps: usize,
    burn_in: usize,
    thin: usize,
    step_size: f64,
    target_accept: f64,
    beta: f64,
    seed: u64,
    kernel: &str,
    init: &str,
) -> PyResult<PyPosteriorDraws> {
    let prior = build_prior(prior, sigma, half_width)?;
    let cfg = build_sampler_config(
        n_chains,
        n_steps,
        burn_in,
        thin,
        step_size,
        target_accept,
        beta,
        seed,
        kernel,
        init,
    )?;
    sampler::run_chains(
        &data.0,
        shape.0,
        &prior,
        &cfg,
        truth.as_deref().map(|t| &t.0),
    )
    .map(PyPosteriorDraws)
    .map_err(err)
}

/// Estimate the Bayesian generalization error from pooled draws; returns
/// `(g_hat, std_err)`.
#[pyfunction]
#[pyo3(signature = (draws, truth, n_test = 2000, seed = 0))]
fn estimate_gen_error(
    draws: PyRef<'_, PyPosteriorDraws>,
    truth: PyRef<'_, PyGroundTruth>,
    n_test: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    estimators::estimate_gen_error(&draws.0, &truth.0, n_test, seed)
        .map(|e| (e.g_hat, e.std_err))
        .map_err(err)
}

/// Weighted least-squares fit of `n * g_hat` against `points` of
/// `(n, g_hat, std_err)`; returns `(lambda_hat, std_err)`.
#[pyfunction]
fn fit_lambda_slope(points: Vec<(usize, f64, f64)>) -> PyResult<(f64, f64)> {
    estimators::fit_lambda_slope(&points)
        .map(|e| (e.lambda_hat, e.std_err))
        .map_err(err)
}

/// Two-temperature learning-coefficient estimate on one dataset; returns
/// `(lambda_hat, std_err, reliable)`. Pass `truth` to warm-start the
/// tempered chains at the generator.
#[pyfunction]
#[pyo3(signature = (data, shape, truth = None, *, prior = "gaussian", sigma = 10.0,
    half_width = 20.0, n_chains = 2, n_steps = 2800, burn_in = 800, thin = 2,
    step_size = 0.05, target_accept = 0.574, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn estimate_lambda_wbic(
    data: PyRef<'_, PyDataset>,
    shape: PyShape,
    truth: Option<PyRef<'_, PyGroundTruth>>,
    prior: &str,
    sigma: f64,
    half_width: f64,
    n_chains: usize,
    n_steps: usize,
    burn_in: usize,
    thin: usize,
    step_size: f64,
    target_accept: f64,
    seed: u64,
) -> PyResult<(f64, f64, bool)> {
    let prior = build_prior(prior, sigma, half_width)?;
    let cfg = build_sampler_config(
        n_chains,
        n_steps,
        burn_in,
        thin,
        step_size,
        target_accept,
        1.0,
        seed,
        "mala",
        "prior",
    )?;
    let init: Option<&Weights> = truth.as_ref().map(|t| t.0.weights());
    estimators::estimate_lambda_wbic(&data.0, shape.0, &prior, &cfg, init)
        .map(|e| (e.lambda_hat, e.std_err, e.reliable))
        .map_err(err)
}

/// Monte-Carlo volume-scaling estimate of a learning coefficient.
/// `error_fn` is one of `"K"`, `"K_bar"`, `"rrr"`.
#[pyfunction]
#[pyo3(signature = (error_fn, truth, *, box_half_width = 4.0,
    n_samples = 20_000_000, thresholds = None, seed = 0))]
fn volume_scaling_lambda(
    error_fn: &str,
    truth: PyRef<'_, PyGroundTruth>,
    box_half_width: f64,
    n_samples: u64,
    thresholds: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<PyVolumeReport> {
    let error_fn = match error_fn {
        "K" => volume::VolumeErrorFn::K,
        "K_bar" => volume::VolumeErrorFn::KBar,
        "rrr" => volume::VolumeErrorFn::Rrr,
        other => {
            return Err(PyValueError::new_err(format!(
                "error_fn must be \"K\", \"K_bar\", or \"rrr\", got {other:?}"
            )))
        }
    };
    let thresholds = thresholds
        .unwrap_or_else(|| (0..5).map(|i| 1e-4 * 10f64.powi(-i)).collect());
    volume::volume_scaling_lambda(
        error_fn,
        &truth.0,
        box_half_width,
        n_samples,
        &thresholds,
        seed,
    )
    .map(PyVolumeReport)
    .map_err(err)
}

#[pymodule]
fn pcbm_slt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRational>()?;
    m.add_class::<PyShape>()?;
    m.add_class::<PyGroundTruth>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPosteriorDraws>()?;
    m.add_class::<PyVolumeReport>()?;
    m.add_function(wrap_pyfunction!(rlct_rrr, m)?)?;
    m.add_function(wrap_pyfunction!(rlct_cbm, m)?)?;
    m.add_function(wrap_pyfunction!(rlct_pcbm_upper, m)?)?;
    m.add_function(wrap_pyfunction!(gen_error_gap_lower, m)?)?;
    m.add_function(wrap_pyfunction!(rlct_pcbm_upper_categorical, m)?)?;
    m.add_function(wrap_pyfunction!(make_ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(sample_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_chains, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_gen_error, m)?)?;
    m.add_function(wrap_pyfunction!(fit_lambda_slope, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_lambda_wbic, m)?)?;
    m.add_function(wrap_pyfunction!(volume_scaling_lambda, m)?)?;
    Ok(())
}
