//! Volume-scaling oracle for RLCTs.
//!
//! Near a minimum of an analytic error function `f >= 0`, the volume of the
//! sublevel set inside a sampling box scales as
//!
//! ```text
//!     V(t) = Vol{ w : f(w) < t } ~ c * t^lambda * (-log t)^(m-1),
//! ```
//!
//! so `lambda` is read off as the least-squares slope of `log V(t)` against
//! `log t` over a grid of thresholds spanning several decades. Volumes are
//! estimated by uniform Monte Carlo over the box. The estimator is
//! deliberately independent of the symbolic RLCT formulas it is used to
//! check: it sees only a black-box error function.
//!
//! The log-factor with multiplicity `m > 1` bends the fit; a quadratic
//! refit flags visible curvature so shallow-threshold runs are not trusted
//! silently.

use crate::error::{Error, Result};
use crate::model::GroundTruth;
use crate::seed::mix_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Minimum Monte Carlo hits required below the smallest threshold.
pub const MIN_HITS: u64 = 100;
/// Thresholds must span at least this ratio (four decades).
pub const MIN_THRESHOLD_SPAN: f64 = 1e4;
/// Parameter-count ceiling; uniform sampling is hopeless beyond this.
pub const MAX_ORACLE_PARAMS: usize = 8;
/// Curvature warning: fitted slope drift across the threshold range.
const CURVATURE_DRIFT_LIMIT: f64 = 0.05;

const CHUNK: u64 = 1 << 16;

/// Which error function the oracle probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeErrorFn {
    /// `K(w) = |AB - A0 B0|^2 + |B2 - B2_0|^2`.
    K,
    /// The separated upper-bound surrogate with coefficient 2 on the
    /// product blocks.
    KBar,
    /// Pure reduced-rank error `|AB - A0 B0|^2`; requires `h2 = 0`.
    Rrr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeScalingReport {
    pub lambda_vol: f64,
    pub thresholds: Vec<f64>,
    /// `ln V(t)` per threshold (estimated volume, not probability).
    pub log_volume: Vec<f64>,
    pub hits: Vec<u64>,
    pub n_samples: u64,
    pub box_half_width: f64,
    pub dim: usize,
    pub fit_r2: f64,
    pub curvature_warning: bool,
}

fn validate_inputs(
    dim: usize,
    box_half_width: f64,
    n_samples: u64,
    thresholds: &[f64],
) -> Result<()> {
    if dim == 0 || dim > MAX_ORACLE_PARAMS {
        return Err(Error::validation(format!(
            "oracle dimension must be in 1..={MAX_ORACLE_PARAMS}, got {dim}"
        )));
    }
    if !(box_half_width > 0.0 && box_half_width.is_finite()) {
        return Err(Error::validation(format!(
            "box_half_width must be positive and finite, got {box_half_width}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::validation("n_samples must be positive"));
    }
    if thresholds.len() < 2 {
        return Err(Error::validation(
            "need at least 2 thresholds for a slope",
        ));
    }
    for t in thresholds {
        if !(*t > 0.0 && t.is_finite()) {
            return Err(Error::validation(format!(
                "thresholds must be positive and finite, got {t}"
            )));
        }
    }
    if !thresholds.windows(2).all(|w| w[0] > w[1]) {
        return Err(Error::validation(
            "thresholds must be strictly decreasing",
        ));
    }
    let span = thresholds[0] / thresholds[thresholds.len() - 1];
    // Tolerate rounding when the grid is built from powers of ten and the
    // quotient lands a few ulps below the nominal span.
    if span < MIN_THRESHOLD_SPAN * (1.0 - 1e-9) {
        return Err(Error::validation(format!(
            "thresholds span a ratio of {span:.1}; need at least {MIN_THRESHOLD_SPAN} \
             (four decades) for a trustworthy slope"
        )));
    }
    Ok(())
}

/// Ordinary least squares of `y` on `x`: `(slope, intercept, r2)`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Quadratic refit on centered `x`; returns the absolute drift of the local
/// slope `c1 + 2 c2 x` across the fitted range, i.e. `|c2| * span`.
fn quadratic_slope_drift(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let xc: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    for (xi, yi) in xc.iter().zip(y) {
        let row = nalgebra::Vector3::new(1.0, *xi, xi * xi);
        ata += row * row.transpose();
        atb += row * *yi;
    }
    let Some(coef) = ata.lu().solve(&atb) else {
        return 0.0;
    };
    let span = x
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - x.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    (coef[2] * span).abs()
}

/// Estimates the volume-scaling exponent of an arbitrary nonnegative error
/// function over the centered box `[-b, b]^dim`. Sampling is chunked with
/// per-chunk seeds, so the result is reproducible and independent of the
/// number of worker threads.
pub fn volume_scaling_custom(
    dim: usize,
    box_half_width: f64,
    n_samples: u64,
    thresholds: &[f64],
    seed: u64,
    f: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<VolumeScalingReport> {
    validate_inputs(dim, box_half_width, n_samples, thresholds)?;
    let t_len = thresholds.len();
    let n_chunks = n_samples.div_ceil(CHUNK);

    // Each sample lands in the bucket of the smallest threshold above it;
    // suffix sums then give cumulative hit counts per threshold.
    let buckets = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[ci]));
            let mut local = vec![0u64; t_len];
            let mut point = vec![0.0f64; dim];
            let this_chunk = CHUNK.min(n_samples - ci * CHUNK);
            for _ in 0..this_chunk {
                for v in point.iter_mut() {
                    *v = rng.random_range(-box_half_width..box_half_width);
                }
                let val = f(&point);
                if val >= thresholds[0] {
                    continue;
                }
                let k = thresholds.partition_point(|&t| val < t);
                local[k - 1] += 1;
            }
            local
        })
        .reduce(
            || vec![0u64; t_len],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );

    let mut hits = buckets;
    for j in (0..t_len - 1).rev() {
        hits[j] += hits[j + 1];
    }
    if hits[t_len - 1] < MIN_HITS {
        return Err(Error::WidenThresholds {
            hits: hits[t_len - 1],
            needed: MIN_HITS,
            threshold: thresholds[t_len - 1],
        });
    }

    let box_log_volume = dim as f64 * (2.0 * box_half_width).ln();
    let log_volume: Vec<f64> = hits
        .iter()
        .map(|&h| (h as f64 / n_samples as f64).ln() + box_log_volume)
        .collect();
    let x: Vec<f64> = thresholds.iter().map(|t| t.ln()).collect();
    let (slope, _, r2) = linear_fit(&x, &log_volume);
    let drift = quadratic_slope_drift(&x, &log_volume);

    Ok(VolumeScalingReport {
        lambda_vol: slope,
        thresholds: thresholds.to_vec(),
        log_volume,
        hits,
        n_samples,
        box_half_width,
        dim,
        fit_r2: r2,
        curvature_warning: drift > CURVATURE_DRIFT_LIMIT,
    })
}

/// Flattened truth blocks for allocation-free error evaluation inside the
/// sampling loop. `flat` layout matches [`crate::model::Weights::flat`]:
/// `A` row-major (`m x h`), then `B` row-major (`h x n`).
struct ErrorEval {
    kind: VolumeErrorFn,
    m: usize,
    n: usize,
    h: usize,
    h1: usize,
    truth_product: Vec<f64>,
    truth_tacit: Vec<f64>,
    truth_super: Vec<f64>,
    truth_b2: Vec<f64>,
}

impl ErrorEval {
    fn new(kind: VolumeErrorFn, truth: &GroundTruth) -> Self {
        let shape = truth.shape();
        let w = truth.weights();
        let to_row_major = |m: nalgebra::DMatrix<f64>| -> Vec<f64> {
            let mut out = Vec::with_capacity(m.nrows() * m.ncols());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.push(m[(i, j)]);
                }
            }
            out
        };
        ErrorEval {
            kind,
            m: shape.m_out,
            n: shape.n_in,
            h: shape.hidden_total(),
            h1: shape.h1,
            truth_product: to_row_major(w.product()),
            truth_tacit: to_row_major(w.tacit_product()),
            truth_super: to_row_major(w.supervised_product()),
            truth_b2: to_row_major(w.b2().into_owned()),
        }
    }

    fn b2_term(&self, b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in self.h1..self.h {
            for j in 0..self.n {
                let d = b[k * self.n + j] - self.truth_b2[(k - self.h1) * self.n + j];
                acc += d * d;
            }
        }
        acc
    }

    fn eval(&self, flat: &[f64]) -> f64 {
        let (m, n, h) = (self.m, self.n, self.h);
        let a = &flat[..m * h];
        let b = &flat[m * h..];
        match self.kind {
            VolumeErrorFn::K | VolumeErrorFn::Rrr => {
                let mut acc = 0.0;
                for i in 0..m {
                    for j in 0..n {
                        let mut s = 0.0;
                        for k in 0..h {
                            s += a[i * h + k] * b[k * n + j];
                        }
                        let d = s - self.truth_product[i * n + j];
                        acc += d * d;
                    }
                }
                if self.kind == VolumeErrorFn::K {
                    acc += self.b2_term(b);
                }
                acc
            }
            VolumeErrorFn::KBar => {
                let mut acc = 0.0;
                for i in 0..m {
                    for j in 0..n {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for k in 0..self.h1 {
                            s1 += a[i * h + k] * b[k * n + j];
                        }
                        for k in self.h1..h {
                            s2 += a[i * h + k] * b[k * n + j];
                        }
                        let d1 = s1 - self.truth_tacit[i * n + j];
                        let d2 = s2 - self.truth_super[i * n + j];
                        acc += 2.0 * (d1 * d1 + d2 * d2);
                    }
                }
                acc + self.b2_term(b)
            }
        }
    }
}

/// Volume-scaling estimate for one of the built-in error functions around a
/// concrete ground truth. The box must contain the truth weights.
pub fn volume_scaling_lambda(
    error_fn: VolumeErrorFn,
    truth: &GroundTruth,
    box_half_width: f64,
    n_samples: u64,
    thresholds: &[f64],
    seed: u64,
) -> Result<VolumeScalingReport> {
    let shape = truth.shape();
    if error_fn == VolumeErrorFn::Rrr && shape.h2 != 0 {
        return Err(Error::validation(format!(
            "the rrr error function needs a shape with no supervised units, \
             got h2 = {}",
            shape.h2
        )));
    }
    let dim = shape.param_count();
    let max_entry = truth
        .weights()
        .flat()
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if max_entry >= box_half_width {
        return Err(Error::validation(format!(
            "box_half_width {box_half_width} does not contain the truth \
             (largest |entry| = {max_entry:.3})"
        )));
    }
    let eval = ErrorEval::new(error_fn, truth);
    volume_scaling_custom(dim, box_half_width, n_samples, thresholds, seed, |p| {
        eval.eval(p)
    })
}
