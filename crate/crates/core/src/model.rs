//! The linear Gaussian concept bottleneck model.
//!
//! Truth and model share one architecture: inputs `x in R^N`, hidden layer
//! `H = H1 + H2`, outputs `y in R^M`, concepts `c in R^H2`. With weights
//! `A: M x H` and `B: H x N` (supervised block `B2` = last `H2` rows of `B`),
//! a datum is generated as
//!
//! ```text
//!     x ~ N(0, I_N),    y = A0 B0 x + e_y,    c = B2_0 x + e_c,
//! ```
//!
//! with unit Gaussian noise. The model density is the same form at candidate
//! weights `(A, B)`. Averaging the Kullback-Leibler divergence from truth to
//! model over `x ~ N(0, I_N)` gives half the *averaged error*
//!
//! ```text
//!     K(A, B) = |A B - A0 B0|^2 + |B2 - B2_0|^2        (Frobenius norms)
//! ```
//!
//! whose zero set is exactly the true-distribution fiber. [`averaged_error_upper`]
//! is a block-decoupled pointwise upper bound on `K` with the same zero set
//! and the same threshold exponent; see its doc for the coefficient choice.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shape::PcbmShape;

/// Relative singular-value cutoff for the numerical rank check.
const RANK_TOLERANCE: f64 = 1e-8;
/// Ground-truth regeneration budget before giving up on the target rank.
const MAX_RANK_ATTEMPTS: usize = 100;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Differential entropy of `N(mu, I_dim)`: `dim/2 * (1 + log 2 pi)`.
pub fn gaussian_entropy(dim: usize) -> f64 {
    dim as f64 / 2.0 * (1.0 + LN_2PI)
}

/// A weight point `(A, B)` tied to its shape. Also used as the container for
/// gradients and parameter-space displacements, which live in the same space.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub(crate) shape: PcbmShape,
    pub(crate) a: DMatrix<f64>,
    pub(crate) b: DMatrix<f64>,
}

impl Weights {
    pub fn from_matrices(shape: PcbmShape, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let h = shape.hidden_total();
        if a.nrows() != shape.m_out || a.ncols() != h {
            return Err(Error::DimensionMismatch(format!(
                "A must be {}x{}, got {}x{}",
                shape.m_out,
                h,
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != h || b.ncols() != shape.n_in {
            return Err(Error::DimensionMismatch(format!(
                "B must be {}x{}, got {}x{}",
                h,
                shape.n_in,
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Weights { shape, a, b })
    }

    pub fn zeros(shape: PcbmShape) -> Self {
        Weights {
            shape,
            a: DMatrix::zeros(shape.m_out, shape.hidden_total()),
            b: DMatrix::zeros(shape.hidden_total(), shape.n_in),
        }
    }

    pub fn shape(&self) -> &PcbmShape {
        &self.shape
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// The supervised block: last `h2` rows of `B`.
    pub fn b2(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.b.rows(self.shape.h1, self.shape.h2)
    }

    /// Full end-to-end map `A B` (`m_out x n_in`).
    pub fn product(&self) -> DMatrix<f64> {
        &self.a * &self.b
    }

    /// Tacit-block product `A1 B1` (`m_out x n_in`).
    pub fn tacit_product(&self) -> DMatrix<f64> {
        self.a.columns(0, self.shape.h1) * self.b.rows(0, self.shape.h1)
    }

    /// Supervised-block product `A2 B2` (`m_out x n_in`).
    pub fn supervised_product(&self) -> DMatrix<f64> {
        self.a.columns(self.shape.h1, self.shape.h2) * self.b.rows(self.shape.h1, self.shape.h2)
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    /// Entries in the canonical flat order: `A` row-major, then `B` row-major.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for i in 0..self.a.nrows() {
            for j in 0..self.a.ncols() {
                out.push(self.a[(i, j)]);
            }
        }
        for i in 0..self.b.nrows() {
            for j in 0..self.b.ncols() {
                out.push(self.b[(i, j)]);
            }
        }
        out
    }

    /// Rebuilds a weight point from the canonical flat order.
    pub fn from_flat(shape: PcbmShape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "flat parameter vector must have length {}, got {}",
                shape.param_count(),
                flat.len()
            )));
        }
        let h = shape.hidden_total();
        let split = shape.m_out * h;
        let a = DMatrix::from_row_slice(shape.m_out, h, &flat[..split]);
        let b = DMatrix::from_row_slice(h, shape.n_in, &flat[split..]);
        Weights::from_matrices(shape, a, b)
    }

    /// `self += alpha * other`, entrywise over both matrices.
    pub(crate) fn axpy(&mut self, alpha: f64, other: &Weights) {
        self.a.zip_apply(&other.a, |s, o| *s += alpha * o);
        self.b.zip_apply(&other.b, |s, o| *s += alpha * o);
    }

    pub(crate) fn norm_squared(&self) -> f64 {
        self.a.norm_squared() + self.b.norm_squared()
    }
}

/// The data-generating weights, with the provenance needed to regenerate or
/// serialize them.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    weights: Weights,
    scale: f64,
    seed: u64,
}

impl GroundTruth {
    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn shape(&self) -> &PcbmShape {
        self.weights.shape()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn from_weights(weights: Weights, scale: f64, seed: u64) -> Self {
        GroundTruth {
            weights,
            scale,
            seed,
        }
    }
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, sd: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

/// Numerical rank via singular values, relative cutoff `RANK_TOLERANCE`.
fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s >= RANK_TOLERANCE * max).count()
}

/// Draws ground-truth weights whose tacit product `A1 B1` has rank exactly
/// `r_prime`. `A1` is built as an `m_out x r_prime` times `r_prime x h1`
/// factor product (so the rank cannot exceed `r_prime`) and `B1`, `A2`, `B2`
/// are dense Gaussian draws; the exact rank is then verified by SVD and the
/// draw is retried (fresh randomness, same stream) up to 100 times.
pub fn make_ground_truth(shape: PcbmShape, scale: f64, seed: u64) -> Result<GroundTruth> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::validation(format!(
            "truth scale must be positive and finite: {scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = shape.hidden_total();
    for _ in 0..MAX_RANK_ATTEMPTS {
        let a1 = if shape.r_prime == 0 {
            DMatrix::zeros(shape.m_out, shape.h1)
        } else {
            let left = gaussian_matrix(&mut rng, shape.m_out, shape.r_prime, scale);
            let right = gaussian_matrix(&mut rng, shape.r_prime, shape.h1, scale);
            left * right
        };
        let b1 = gaussian_matrix(&mut rng, shape.h1, shape.n_in, scale);
        let a2 = gaussian_matrix(&mut rng, shape.m_out, shape.h2, scale);
        let b2 = gaussian_matrix(&mut rng, shape.h2, shape.n_in, scale);

        let mut a = DMatrix::zeros(shape.m_out, h);
        a.columns_mut(0, shape.h1).copy_from(&a1);
        a.columns_mut(shape.h1, shape.h2).copy_from(&a2);
        let mut b = DMatrix::zeros(h, shape.n_in);
        b.rows_mut(0, shape.h1).copy_from(&b1);
        b.rows_mut(shape.h1, shape.h2).copy_from(&b2);

        let weights = Weights::from_matrices(shape, a, b)?;
        if numerical_rank(&weights.tacit_product()) == shape.r_prime {
            return Ok(GroundTruth {
                weights,
                scale,
                seed,
            });
        }
    }
    Err(Error::RankNotReached {
        target: shape.r_prime,
        attempts: MAX_RANK_ATTEMPTS,
    })
}

/// A training set of `n` triples, stored one datum per row: `x` is
/// `n x n_in`, `y` is `n x m_out`, `c` is `n x h2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub(crate) x: DMatrix<f64>,
    pub(crate) y: DMatrix<f64>,
    pub(crate) c: DMatrix<f64>,
    pub(crate) seed: u64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.x.ncols(), self.y.ncols(), self.c.ncols())
    }

    /// The first `n` rows as a dataset of their own. Growing-`n` studies
    /// read nested prefixes of one draw so that sampling noise moves every
    /// grid point coherently instead of resampling it per point.
    pub fn prefix(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.n() {
            return Err(Error::validation(format!(
                "prefix length must lie in 1..={}, got {n}",
                self.n()
            )));
        }
        Ok(Dataset {
            x: self.x.rows(0, n).into_owned(),
            y: self.y.rows(0, n).into_owned(),
            c: self.c.rows(0, n).into_owned(),
            seed: self.seed,
        })
    }
}

/// Samples `n` triples from the truth. Draw order is fixed (inputs, then
/// output noise, then concept noise, each row-major), so a `(truth, n, seed)`
/// triple reproduces the dataset bit for bit.
pub fn sample_dataset(truth: &GroundTruth, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::validation("dataset size n must be positive"));
    }
    let shape = *truth.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, shape.n_in);
    for i in 0..n {
        for j in 0..shape.n_in {
            x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let product = truth.weights().product();
    let b2 = truth.weights().b2().into_owned();
    let mut y = &x * product.transpose();
    for i in 0..n {
        for j in 0..shape.m_out {
            y[(i, j)] += rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut c = &x * b2.transpose();
    for i in 0..n {
        for j in 0..shape.h2 {
            c[(i, j)] += rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Dataset { x, y, c, seed })
}

fn check_dims(w: &Weights, data: &Dataset) -> Result<()> {
    let shape = w.shape();
    let (n_in, m_out, h2) = data.dims();
    if (shape.n_in, shape.m_out, shape.h2) != (n_in, m_out, h2) {
        return Err(Error::DimensionMismatch(format!(
            "weights expect (n_in, m_out, h2) = ({}, {}, {}), dataset has ({}, {}, {})",
            shape.n_in, shape.m_out, shape.h2, n_in, m_out, h2
        )));
    }
    Ok(())
}

/// `n L_n(w)`: the negative log likelihood of the whole dataset, including
/// the Gaussian normalization `n (m_out + h2) / 2 * log 2 pi`.
pub fn neg_log_likelihood(w: &Weights, data: &Dataset) -> Result<f64> {
    check_dims(w, data)?;
    let residual_y = data.y() - data.x() * w.product().transpose();
    let residual_c = data.c() - data.x() * w.b2().transpose();
    let n = data.n() as f64;
    let dim = (w.shape().m_out + w.shape().h2) as f64;
    Ok(0.5 * (residual_y.norm_squared() + residual_c.norm_squared()) + n * dim / 2.0 * LN_2PI)
}

/// `n L_n` and its gradient in `(A, B)`, sharing one residual pass.
pub fn neg_log_likelihood_grad(w: &Weights, data: &Dataset) -> Result<(f64, Weights)> {
    check_dims(w, data)?;
    let shape = *w.shape();
    let residual_y = data.y() - data.x() * w.product().transpose();
    let residual_c = data.c() - data.x() * w.b2().transpose();
    let n = data.n() as f64;
    let dim = (shape.m_out + shape.h2) as f64;
    let nll = 0.5 * (residual_y.norm_squared() + residual_c.norm_squared()) + n * dim / 2.0 * LN_2PI;

    // d(nll)/dA = -R_y^T (X B^T);  d(nll)/dB = -A^T (R_y^T X), plus the
    // concept term -R_c^T X on the supervised rows.
    let grad_a = -(residual_y.transpose() * (data.x() * w.b().transpose()));
    let mut grad_b = -(w.a().transpose() * (residual_y.transpose() * data.x()));
    let grad_b2 = residual_c.transpose() * data.x();
    grad_b
        .rows_mut(shape.h1, shape.h2)
        .zip_apply(&grad_b2, |g, extra| *g -= extra);
    Ok((nll, Weights::from_matrices(shape, grad_a, grad_b)?))
}

/// Log density of a single triple under the model at `w`.
pub fn log_density_point(w: &Weights, x: &[f64], y: &[f64], c: &[f64]) -> f64 {
    let shape = w.shape();
    let x = nalgebra::DVectorView::from_slice(x, shape.n_in);
    let y = nalgebra::DVectorView::from_slice(y, shape.m_out);
    let c = nalgebra::DVectorView::from_slice(c, shape.h2);
    let ry = y - w.product() * x;
    let rc = c - w.b2() * x;
    let dim = (shape.m_out + shape.h2) as f64;
    -0.5 * (ry.norm_squared() + rc.norm_squared()) - dim / 2.0 * LN_2PI
}

/// The averaged error `K(w) = |AB - A0 B0|^2 + |B2 - B2_0|^2`. Equals twice
/// the input-averaged KL divergence from the truth's densities to the
/// model's.
pub fn averaged_error_k(w: &Weights, truth: &GroundTruth) -> f64 {
    let dp = w.product() - truth.weights().product();
    let db2 = w.b2() - truth.weights().b2();
    dp.norm_squared() + db2.norm_squared()
}

/// A block-decoupled upper bound on `K`:
///
/// ```text
///     Kbar(w) = 2 |A1 B1 - A1_0 B1_0|^2 + 2 |A2 B2 - A2_0 B2_0|^2 + |B2 - B2_0|^2.
/// ```
///
/// The coefficient 2 absorbs the cross term of `|X + Y|^2 <= 2|X|^2 + 2|Y|^2`,
/// making `K <= Kbar` hold at every point (the coefficient-free sum would
/// fail whenever the two block deviations are positively aligned). Since the
/// coefficient-free sum `S` satisfies `S <= Kbar <= 2 S`, the bound keeps the
/// zero set and the threshold exponent of the decoupled decomposition, so
/// `lambda(Kbar) = lambda_rrr(tacit) + h2 (m_out + n_in) / 2` still holds.
pub fn averaged_error_upper(w: &Weights, truth: &GroundTruth) -> f64 {
    let dt = w.tacit_product() - truth.weights().tacit_product();
    let ds = w.supervised_product() - truth.weights().supervised_product();
    let db2 = w.b2() - truth.weights().b2();
    2.0 * dt.norm_squared() + 2.0 * ds.norm_squared() + db2.norm_squared()
}

/// The three log-density scales of a `(weights, dataset, truth)` triple.
#[derive(Debug, Clone, Serialize)]
pub struct LogDensityTerms {
    /// `n L_n(w)` in nats.
    pub neg_log_lik: f64,
    /// Empirical entropy `S_n = -(1/n) sum log q(Y_i, C_i | X_i)`.
    pub entropy_empirical: f64,
    /// Exact differential entropy `S = (m_out + h2)/2 (1 + log 2 pi)`.
    pub entropy_true: f64,
}

pub fn log_density_terms(w: &Weights, data: &Dataset, truth: &GroundTruth) -> Result<LogDensityTerms> {
    let neg_log_lik = neg_log_likelihood(w, data)?;
    let at_truth = neg_log_likelihood(truth.weights(), data)?;
    Ok(LogDensityTerms {
        neg_log_lik,
        entropy_empirical: at_truth / data.n() as f64,
        entropy_true: gaussian_entropy(truth.shape().m_out + truth.shape().h2),
    })
}

// ---------------------------------------------------------------------------
// Persistence: CSV (one datum per row) plus a JSON sidecar that carries the
// shape, provenance seeds, and the exact truth matrices.
// ---------------------------------------------------------------------------

/// Sidecar metadata stored next to a dataset CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub shape: PcbmShape,
    pub scale: f64,
    pub truth_seed: u64,
    pub dataset_seed: u64,
    pub n: usize,
    /// Truth matrices, row-major.
    pub a0: Vec<Vec<f64>>,
    pub b0: Vec<Vec<f64>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!(
            "expected a {nrows}x{ncols} row-major matrix"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl DatasetSidecar {
    pub fn new(truth: &GroundTruth, data: &Dataset) -> Self {
        DatasetSidecar {
            shape: *truth.shape(),
            scale: truth.scale(),
            truth_seed: truth.seed(),
            dataset_seed: data.seed(),
            n: data.n(),
            a0: matrix_rows(truth.weights().a()),
            b0: matrix_rows(truth.weights().b()),
        }
    }

    pub fn truth(&self) -> Result<GroundTruth> {
        let h = self.shape.hidden_total();
        let a = matrix_from_rows(&self.a0, self.shape.m_out, h)?;
        let b = matrix_from_rows(&self.b0, h, self.shape.n_in)?;
        Ok(GroundTruth {
            weights: Weights::from_matrices(self.shape, a, b)?,
            scale: self.scale,
            seed: self.truth_seed,
        })
    }
}

impl Dataset {
    /// Writes `row,x_0..x_{N-1},y_0..y_{M-1},c_0..c_{H2-1}`.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        let (n_in, m_out, h2) = self.dims();
        let mut header = String::from("row");
        for j in 0..n_in {
            header.push_str(&format!(",x_{j}"));
        }
        for j in 0..m_out {
            header.push_str(&format!(",y_{j}"));
        }
        for j in 0..h2 {
            header.push_str(&format!(",c_{j}"));
        }
        writeln!(w, "{header}")?;
        for i in 0..self.n() {
            let mut line = i.to_string();
            for j in 0..n_in {
                line.push_str(&format!(",{}", self.x[(i, j)]));
            }
            for j in 0..m_out {
                line.push_str(&format!(",{}", self.y[(i, j)]));
            }
            for j in 0..h2 {
                line.push_str(&format!(",{}", self.c[(i, j)]));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Reads a CSV produced by [`Dataset::write_csv`]; dimensions come from
    /// the header, the seed from the sidecar.
    pub fn read_csv(r: impl std::io::Read, sidecar: &DatasetSidecar) -> Result<Dataset> {
        let mut lines = std::io::BufRead::lines(std::io::BufReader::new(r));
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset csv".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        let n_in = cols.iter().filter(|c| c.starts_with("x_")).count();
        let m_out = cols.iter().filter(|c| c.starts_with("y_")).count();
        let h2 = cols.iter().filter(|c| c.starts_with("c_")).count();
        if cols.first() != Some(&"row") || n_in == 0 || m_out == 0 {
            return Err(Error::Parse(format!("unexpected dataset header: {header}")));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("bad float {v:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != n_in + m_out + h2 {
                return Err(Error::Parse(format!(
                    "row {} has {} values, expected {}",
                    rows.len(),
                    vals.len(),
                    n_in + m_out + h2
                )));
            }
            rows.push(vals);
        }
        let n = rows.len();
        if n == 0 {
            return Err(Error::Parse("dataset csv has no data rows".into()));
        }
        let x = DMatrix::from_fn(n, n_in, |i, j| rows[i][j]);
        let y = DMatrix::from_fn(n, m_out, |i, j| rows[i][n_in + j]);
        let c = DMatrix::from_fn(n, h2, |i, j| rows[i][n_in + m_out + j]);
        Ok(Dataset {
            x,
            y,
            c,
            seed: sidecar.dataset_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::PcbmShape;

    fn shape_2112_r1() -> PcbmShape {
        PcbmShape::new(2, 1, 1, 2, 1).unwrap()
    }

    /// Independent rank oracle: Gaussian elimination with partial pivoting.
    fn elimination_rank(m: &DMatrix<f64>) -> usize {
        let mut m = m.clone();
        let (rows, cols) = (m.nrows(), m.ncols());
        let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if scale == 0.0 || rows == 0 || cols == 0 {
            return 0;
        }
        let tol = 1e-8 * scale;
        let mut rank = 0;
        for col in 0..cols {
            let pivot = (rank..rows).max_by(|&i, &j| {
                m[(i, col)].abs().partial_cmp(&m[(j, col)].abs()).unwrap()
            });
            let Some(p) = pivot else { break };
            if m[(p, col)].abs() < tol {
                continue;
            }
            m.swap_rows(rank, p);
            for i in (rank + 1)..rows {
                let f = m[(i, col)] / m[(rank, col)];
                for j in col..cols {
                    m[(i, j)] -= f * m[(rank, j)];
                }
            }
            rank += 1;
            if rank == rows {
                break;
            }
        }
        rank
    }

    #[test]
    fn ground_truth_rank_is_exact() {
        for (n, h1, h2, m) in [(2, 1, 1, 2), (3, 2, 1, 3), (2, 2, 2, 2), (4, 3, 1, 2)] {
            for r in 0..=n.min(h1).min(m) {
                let shape = PcbmShape::new(n, h1, h2, m, r).unwrap();
                let truth = make_ground_truth(shape, 1.0, 7 + r as u64).unwrap();
                let tacit = truth.weights().tacit_product();
                assert_eq!(elimination_rank(&tacit), r, "shape {shape:?}");
            }
        }
    }

    #[test]
    fn zero_rank_gives_zero_tacit_block() {
        let shape = PcbmShape::new(2, 2, 1, 2, 0).unwrap();
        let truth = make_ground_truth(shape, 1.0, 3).unwrap();
        assert_eq!(truth.weights().tacit_product().norm_squared(), 0.0);
        // but the tacit factors' downstream block B1 is still a live draw
        assert!(truth.weights().b().rows(0, 2).norm_squared() > 0.0);
    }

    #[test]
    fn ground_truth_is_deterministic() {
        let shape = shape_2112_r1();
        let t1 = make_ground_truth(shape, 1.0, 42).unwrap();
        let t2 = make_ground_truth(shape, 1.0, 42).unwrap();
        assert_eq!(t1.weights().a(), t2.weights().a());
        assert_eq!(t1.weights().b(), t2.weights().b());
        let t3 = make_ground_truth(shape, 1.0, 43).unwrap();
        assert_ne!(t1.weights().a(), t3.weights().a());
    }

    #[test]
    fn ground_truth_rejects_bad_scale() {
        let shape = shape_2112_r1();
        assert!(make_ground_truth(shape, 0.0, 1).is_err());
        assert!(make_ground_truth(shape, -1.0, 1).is_err());
        assert!(make_ground_truth(shape, f64::NAN, 1).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_noise_is_unit_scale() {
        let shape = shape_2112_r1();
        let truth = make_ground_truth(shape, 1.0, 5).unwrap();
        let d1 = sample_dataset(&truth, 20_000, 11).unwrap();
        let d2 = sample_dataset(&truth, 20_000, 11).unwrap();
        assert_eq!(d1, d2);

        // the y-residual at the truth is exactly the injected noise
        let noise = d1.y() - d1.x() * truth.weights().product().transpose();
        let n = (d1.n() * shape.m_out) as f64;
        let mean = noise.iter().sum::<f64>() / n;
        let var = noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 / n.sqrt(), "noise mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "noise variance {var}");
    }

    #[test]
    fn prefix_returns_the_leading_rows() {
        let shape = shape_2112_r1();
        let truth = make_ground_truth(shape, 1.0, 5).unwrap();
        let full = sample_dataset(&truth, 50, 11).unwrap();
        let head = full.prefix(20).unwrap();
        assert_eq!(head.n(), 20);
        assert_eq!(head.x(), &full.x().rows(0, 20).into_owned());
        assert_eq!(head.y(), &full.y().rows(0, 20).into_owned());
        assert_eq!(head.c(), &full.c().rows(0, 20).into_owned());
        assert_eq!(&full.prefix(50).unwrap(), &full);
        assert!(full.prefix(0).is_err());
        assert!(full.prefix(51).is_err());
    }

    #[test]
    fn nll_at_truth_tracks_entropy() {
        let shape = shape_2112_r1();
        let truth = make_ground_truth(shape, 1.0, 5).unwrap();
        let data = sample_dataset(&truth, 50_000, 13).unwrap();
        let terms = log_density_terms(truth.weights(), &data, &truth).unwrap();
        // S_n -> S with fluctuations of order sqrt(dim/2n)
        let tol = 4.0 * ((shape.m_out + shape.h2) as f64 / (2.0 * data.n() as f64)).sqrt();
        assert!(
            (terms.entropy_empirical - terms.entropy_true).abs() < tol,
            "S_n = {}, S = {}",
            terms.entropy_empirical,
            terms.entropy_true
        );
        assert_eq!(terms.entropy_true, gaussian_entropy(3));
    }

    #[test]
    fn averaged_error_matches_monte_carlo_kl() {
        let shape = shape_2112_r1();
        let truth = make_ground_truth(shape, 1.0, 5).unwrap();
        let mut w = truth.weights().clone();
        w.a[(0, 0)] += 0.3;
        w.b[(1, 1)] -= 0.4;
        let k = averaged_error_k(&w, &truth);

        // E_x KL(q(.|x) || p(.|x; w)) for unit-covariance Gaussians is
        // E_x |mean difference|^2 / 2; estimate it with fresh x draws.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let draws = 100_000;
        let dp = w.product() - truth.weights().product();
        let db2 = w.b2() - truth.weights().b2();
        let mut acc = 0.0;
        for _ in 0..draws {
            let x = DMatrix::from_fn(shape.n_in, 1, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            acc += 0.5 * ((&dp * &x).norm_squared() + (&db2 * &x).norm_squared());
        }
        let mc_kl = acc / draws as f64;
        assert!(
            ((2.0 * mc_kl - k) / k).abs() < 0.02,
            "2 E_x KL = {}, K = {}",
            2.0 * mc_kl,
            k
        );
    }

    #[test]
    fn upper_bound_dominates_k_on_random_points() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (n, h1, h2, m, r) in [(2, 1, 1, 2, 1), (1, 1, 1, 1, 0), (3, 2, 1, 2, 1), (2, 0, 2, 2, 0)] {
            let shape = PcbmShape::new(n, h1, h2, m, r).unwrap();
            let truth = make_ground_truth(shape, 1.0, 8).unwrap();
            for _ in 0..1000 {
                let w = Weights::from_matrices(
                    shape,
                    gaussian_matrix(&mut rng, m, h1 + h2, 2.0),
                    gaussian_matrix(&mut rng, h1 + h2, n, 2.0),
                )
                .unwrap();
                let k = averaged_error_k(&w, &truth);
                let kbar = averaged_error_upper(&w, &truth);
                assert!(k <= kbar + 1e-12, "K = {k}, Kbar = {kbar} at {shape:?}");
            }
        }
    }

    #[test]
    fn cancelling_blocks_separate_k_from_upper_bound() {
        // truth: a = [1, 1], b = [1; 1]; candidate shifts the two block
        // products by +0.5 and -0.5 so they cancel in K but not in Kbar
        let shape = PcbmShape::new(1, 1, 1, 1, 1).unwrap();
        let tw = Weights::from_matrices(
            shape,
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
        )
        .unwrap();
        let truth = GroundTruth::from_weights(tw, 1.0, 0);
        let w = Weights::from_matrices(
            shape,
            DMatrix::from_row_slice(1, 2, &[0.5, 1.5]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
        )
        .unwrap();
        let k = averaged_error_k(&w, &truth);
        let kbar = averaged_error_upper(&w, &truth);
        assert!(k.abs() < 1e-12, "blocks should cancel in K, got {k}");
        assert!(kbar > 0.9, "Kbar should see both block moves, got {kbar}");
    }

    #[test]
    fn log_density_point_agrees_with_total_nll() {
        let shape = shape_2112_r1();
        let truth = make_ground_truth(shape, 1.0, 5).unwrap();
        let data = sample_dataset(&truth, 50, 3).unwrap();
        let w = truth.weights();
        let total: f64 = (0..data.n())
            .map(|i| {
                let x: Vec<f64> = data.x().row(i).iter().cloned().collect();
                let y: Vec<f64> = data.y().row(i).iter().cloned().collect();
                let c: Vec<f64> = data.c().row(i).iter().cloned().collect();
                log_density_point(w, &x, &y, &c)
            })
            .sum();
        let nll = neg_log_likelihood(w, &data).unwrap();
        assert!((total + nll).abs() < 1e-9, "sum log p = {total}, nll = {nll}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = shape_2112_r1();
        let truth = make_ground_truth(shape, 1.0, 5).unwrap();
        let data = sample_dataset(&truth, 40, 3).unwrap();
        let mut w = truth.weights().clone();
        w.a[(0, 1)] += 0.2;
        w.b[(0, 0)] -= 0.1;
        let (_, grad) = neg_log_likelihood_grad(&w, &data).unwrap();

        let h = 1e-5;
        let flat = w.flat();
        for idx in 0..flat.len() {
            let mut plus = flat.clone();
            plus[idx] += h;
            let mut minus = flat.clone();
            minus[idx] -= h;
            let fp = neg_log_likelihood(&Weights::from_flat(shape, &plus).unwrap(), &data).unwrap();
            let fm = neg_log_likelihood(&Weights::from_flat(shape, &minus).unwrap(), &data).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.flat()[idx];
            let denom = fd.abs().max(1.0);
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "grad[{idx}]: analytic {an}, finite-difference {fd}"
            );
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let shape = shape_2112_r1();
        let truth = make_ground_truth(shape, 1.0, 5).unwrap();
        let data = sample_dataset(&truth, 10, 3).unwrap();
        let other = PcbmShape::new(2, 1, 2, 2, 1).unwrap();
        let w = Weights::zeros(other);
        assert!(matches!(
            neg_log_likelihood(&w, &data),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn flat_round_trip_preserves_order() {
        let shape = shape_2112_r1();
        let truth = make_ground_truth(shape, 1.0, 5).unwrap();
        let w = truth.weights();
        let flat = w.flat();
        assert_eq!(flat.len(), shape.param_count());
        assert_eq!(flat[0], w.a()[(0, 0)]);
        assert_eq!(flat[1], w.a()[(0, 1)]);
        let back = Weights::from_flat(shape, &flat).unwrap();
        assert_eq!(&back, w);
    }

    #[test]
    fn csv_and_sidecar_round_trip() {
        let shape = shape_2112_r1();
        let truth = make_ground_truth(shape, 1.5, 5).unwrap();
        let data = sample_dataset(&truth, 25, 9).unwrap();

        let mut csv = Vec::new();
        data.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv.clone()).unwrap();
        assert!(text.starts_with("row,x_0,x_1,y_0,y_1,c_0\n"), "header: {}", &text[..40]);

        let sidecar = DatasetSidecar::new(&truth, &data);
        let json = serde_json::to_string(&sidecar).unwrap();
        let sidecar2: DatasetSidecar = serde_json::from_str(&json).unwrap();
        let truth2 = sidecar2.truth().unwrap();
        assert_eq!(truth.weights().a(), truth2.weights().a());
        assert_eq!(truth.weights().b(), truth2.weights().b());

        let data2 = Dataset::read_csv(csv.as_slice(), &sidecar2).unwrap();
        assert_eq!(data2.n(), data.n());
        assert_eq!(data2.seed(), data.seed());
        let max_err = (data2.x() - data.x()).abs().max();
        assert!(max_err < 1e-12, "x round-trip error {max_err}");
        assert!((data2.y() - data.y()).abs().max() < 1e-12);
        assert!((data2.c() - data.c()).abs().max() < 1e-12);
    }
}
