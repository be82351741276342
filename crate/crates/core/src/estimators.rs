//! Generalization-error and RLCT estimators built on posterior draws.
//!
//! The Bayes generalization error of a posterior predictive `p_hat` against
//! the truth `q` is estimated by Monte Carlo over a fresh test set:
//!
//! ```text
//!     G_hat = (1/T) sum_t [ log q(z_t) - log p_hat(z_t) ],
//!     log p_hat(z) = logsumexp_s log p(z | w_s) - log S.
//! ```
//!
//! Two RLCT estimators are provided. The slope fit pools sweep cells and
//! projects `n * mean G_n` onto a constant by weighted least squares. The
//! two-temperature estimator contrasts posterior means of `n L_n` at
//! `beta_1 = 1/log n` and `beta_2 = 1/(2 log n)`:
//!
//! ```text
//!     lambda_hat = (E1 - E2) / (1/beta_1 - 1/beta_2).
//! ```

use crate::diagnostics::{ess, RHAT_FLAG_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::{log_density_point, sample_dataset, Dataset, GroundTruth, Weights, LN_2PI};
use crate::sampler::{run_chains_with_init, PosteriorDraws, PriorSpec, SamplerConfig};
use crate::seed::mix_seed;
use crate::shape::PcbmShape;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenErrorEstimate {
    pub g_hat: f64,
    pub std_err: f64,
    /// Training-set size behind the posterior draws.
    pub n: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlctMethod {
    SlopeFit,
    WbicTwoTemp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlctEstimate {
    pub lambda_hat: f64,
    pub std_err: f64,
    pub method: RlctMethod,
    pub n_grid: Vec<usize>,
    /// False when the underlying chains failed their convergence checks.
    pub reliable: bool,
}

/// Per-datum log likelihoods of every row of `data` under `w`.
fn batch_loglik(w: &Weights, data: &Dataset) -> Vec<f64> {
    let ry = data.y() - data.x() * w.product().transpose();
    let rc = data.c() - data.x() * w.b2().transpose();
    let dim = (data.y().ncols() + data.c().ncols()) as f64;
    let base = -dim / 2.0 * LN_2PI;
    (0..data.n())
        .map(|t| base - 0.5 * (ry.row(t).norm_squared() + rc.row(t).norm_squared()))
        .collect()
}

fn check_point_dims(shape: &PcbmShape, x: &[f64], y: &[f64], c: &[f64]) -> Result<()> {
    if x.len() != shape.n_in || y.len() != shape.m_out || c.len() != shape.h2 {
        return Err(Error::DimensionMismatch(format!(
            "test point dims (x={}, y={}, c={}) do not match shape {}",
            x.len(),
            y.len(),
            c.len(),
            shape.id()
        )));
    }
    Ok(())
}

/// Log posterior-predictive density of one observation: a numerically
/// stable average of per-draw likelihoods.
pub fn log_predictive(draws: &PosteriorDraws, x: &[f64], y: &[f64], c: &[f64]) -> Result<f64> {
    let s = draws.n_draws();
    if s == 0 {
        return Err(Error::validation("no posterior draws to average over"));
    }
    let shape = *draws
        .chains
        .iter()
        .flat_map(|ch| ch.samples.first())
        .next()
        .expect("nonempty draws have a first sample")
        .shape();
    check_point_dims(&shape, x, y, c)?;
    let mut max_v = f64::NEG_INFINITY;
    let mut sumexp = 0.0;
    for w in draws.iter_samples() {
        let v = log_density_point(w, x, y, c);
        if v <= max_v {
            sumexp += (v - max_v).exp();
        } else {
            sumexp = sumexp * (max_v - v).exp() + 1.0;
            max_v = v;
        }
    }
    Ok(max_v + sumexp.ln() - (s as f64).ln())
}

/// Monte Carlo estimate of the Bayes generalization error against a fresh
/// test set of `n_test` observations drawn from the truth.
pub fn estimate_gen_error(
    draws: &PosteriorDraws,
    truth: &GroundTruth,
    n_test: usize,
    seed: u64,
) -> Result<GenErrorEstimate> {
    let s = draws.n_draws();
    if s == 0 {
        return Err(Error::validation("no posterior draws to average over"));
    }
    if n_test < 2 {
        return Err(Error::validation("n_test must be at least 2"));
    }
    let shape = draws
        .chains
        .iter()
        .flat_map(|ch| ch.samples.first())
        .next()
        .expect("nonempty draws have a first sample")
        .shape();
    if shape != truth.shape() {
        return Err(Error::DimensionMismatch(
            "posterior draws and ground truth have different shapes".into(),
        ));
    }

    let test = sample_dataset(truth, n_test, seed)?;
    let true_loglik = batch_loglik(truth.weights(), &test);

    // Streaming logsumexp per test point, one likelihood pass per draw.
    let mut max_v = vec![f64::NEG_INFINITY; n_test];
    let mut sumexp = vec![0.0; n_test];
    for w in draws.iter_samples() {
        let ll = batch_loglik(w, &test);
        for t in 0..n_test {
            let v = ll[t];
            if v <= max_v[t] {
                sumexp[t] += (v - max_v[t]).exp();
            } else {
                sumexp[t] = sumexp[t] * (max_v[t] - v).exp() + 1.0;
                max_v[t] = v;
            }
        }
    }

    let ln_s = (s as f64).ln();
    let terms: Vec<f64> = (0..n_test)
        .map(|t| true_loglik[t] - (max_v[t] + sumexp[t].ln() - ln_s))
        .collect();
    let mean = terms.iter().sum::<f64>() / n_test as f64;
    let var = terms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (n_test - 1) as f64;
    Ok(GenErrorEstimate {
        g_hat: mean,
        std_err: (var / n_test as f64).sqrt(),
        n: draws.n,
        n_test,
    })
}

/// Weighted least-squares fit of the constant `lambda` to the points
/// `n * mean_g`, weighting each by `1 / (n * stderr)^2`. Input tuples are
/// `(n, mean_g, stderr_of_mean_g)` with at least three distinct `n`.
pub fn fit_lambda_slope(points: &[(usize, f64, f64)]) -> Result<RlctEstimate> {
    let mut n_grid: Vec<usize> = points.iter().map(|p| p.0).collect();
    n_grid.sort_unstable();
    n_grid.dedup();
    if n_grid.len() < 3 {
        return Err(Error::validation(format!(
            "slope fit needs at least 3 distinct sample sizes, got {}",
            n_grid.len()
        )));
    }
    let mut sum_w = 0.0;
    let mut sum_wx = 0.0;
    for &(n, g, se) in points {
        if n == 0 {
            return Err(Error::validation("sample size 0 in slope fit"));
        }
        if !g.is_finite() {
            return Err(Error::validation(format!(
                "non-finite mean generalization error at n = {n}"
            )));
        }
        if !(se > 0.0 && se.is_finite()) {
            return Err(Error::validation(format!(
                "stderr at n = {n} must be positive and finite, got {se}"
            )));
        }
        let w = 1.0 / (n as f64 * se).powi(2);
        sum_w += w;
        sum_wx += w * (n as f64 * g);
    }
    Ok(RlctEstimate {
        lambda_hat: sum_wx / sum_w,
        std_err: sum_w.sqrt().recip(),
        method: RlctMethod::SlopeFit,
        n_grid,
        reliable: true,
    })
}

/// The two-temperature contrast, as a pure function of the posterior means
/// of `n L_n` at two inverse temperatures.
pub fn two_temperature_lambda(
    mean_nll_1: f64,
    beta_1: f64,
    mean_nll_2: f64,
    beta_2: f64,
) -> Result<f64> {
    for (label, b) in [("beta_1", beta_1), ("beta_2", beta_2)] {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::validation(format!(
                "{label} must be positive and finite, got {b}"
            )));
        }
    }
    if !(mean_nll_1.is_finite() && mean_nll_2.is_finite()) {
        return Err(Error::validation("posterior means must be finite"));
    }
    let denom = 1.0 / beta_1 - 1.0 / beta_2;
    if denom == 0.0 {
        return Err(Error::validation(
            "the two inverse temperatures must differ",
        ));
    }
    Ok((mean_nll_1 - mean_nll_2) / denom)
}

/// Runs tempered chains at `beta_1 = 1/log n` and `beta_2 = 1/(2 log n)` on
/// one dataset and contrasts the posterior means of `n L_n`. The standard
/// error propagates each run's Monte Carlo error with the effective sample
/// size of its `n L_n` series. `init` warm-starts every chain from a point
/// estimate of the weights; pass it whenever one is available, because the
/// tempered targets inherit the multimodality of the untempered posterior
/// and a cold chain stuck in a spurious basin biases the contrast of means.
pub fn estimate_lambda_wbic(
    data: &Dataset,
    shape: PcbmShape,
    prior: &PriorSpec,
    cfg: &SamplerConfig,
    init: Option<&Weights>,
) -> Result<RlctEstimate> {
    let n = data.n();
    if n < 3 {
        return Err(Error::validation(
            "two-temperature estimation needs n >= 3 so both betas are in (0, 1)",
        ));
    }
    let ln_n = (n as f64).ln();
    let betas = [1.0 / ln_n, 1.0 / (2.0 * ln_n)];

    let mut means = [0.0; 2];
    let mut ses = [0.0; 2];
    let mut reliable = true;
    for (i, &beta) in betas.iter().enumerate() {
        let run_cfg = SamplerConfig {
            beta,
            seed: mix_seed(cfg.seed, &[0x7e39, i as u64 + 1]),
            ..*cfg
        };
        let draws = run_chains_with_init(data, shape, prior, &run_cfg, None, init)?;
        let nll_chains: Vec<Vec<f64>> =
            draws.chains.iter().map(|c| c.nll.clone()).collect();
        let all: Vec<f64> = nll_chains.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (all.len() - 1) as f64;
        let eff = ess(&nll_chains).max(1.0);
        means[i] = mean;
        ses[i] = (var / eff).sqrt();
        reliable &= draws.rhat_max < RHAT_FLAG_THRESHOLD;
    }

    let lambda_hat = two_temperature_lambda(means[0], betas[0], means[1], betas[1])?;
    let denom = (1.0 / betas[0] - 1.0 / betas[1]).abs();
    Ok(RlctEstimate {
        lambda_hat,
        std_err: (ses[0].powi(2) + ses[1].powi(2)).sqrt() / denom,
        method: RlctMethod::WbicTwoTemp,
        n_grid: vec![n],
        reliable,
    })
}
