//! Closed-form learning coefficients.
//!
//! For a model whose Bayes free energy expands as
//!
//! ```text
//!     F_n = n S_n + lambda * log n + O_p(log log n),
//! ```
//!
//! `lambda` is the learning coefficient (the real log canonical threshold of
//! the averaged error function), and the Bayes generalization error obeys
//! `E[G_n] = lambda / n + o(1/n)`. This module evaluates the exact rational
//! `lambda` for three linear model families:
//!
//! * reduced-rank regression `y = U V x` ([`rlct_rrr`]),
//! * fully supervised concept bottlenecks ([`rlct_cbm`]),
//! * partially supervised concept bottlenecks, as an upper bound
//!   ([`rlct_pcbm_upper`], [`rlct_pcbm_upper_categorical`]).
//!
//! Reduced-rank regression with input dimension `N`, hidden dimension `H`,
//! output dimension `M`, and true rank `r` splits into four regimes:
//!
//! ```text
//!     regime 1 (balanced): M+r <= N+H, N+r <= M+H, H+r <= N+M
//!        N+M+H+r even: lambda = { 2(H+r)(N+M) - (N-M)^2 - (H+r)^2 } / 8
//!        N+M+H+r odd:  lambda = { 2(H+r)(N+M) - (N-M)^2 - (H+r)^2 + 1 } / 8
//!     regime 2 (output-heavy, N+H < M+r): lambda = { HN + r(M-H) } / 2
//!     regime 3 (input-heavy,  M+H < N+r): lambda = { HM + r(N-H) } / 2
//!     regime 4 (hidden-heavy, N+M < H+r): lambda = NM / 2
//! ```
//!
//! The regime-4 value is the continuous extension of regime 1 across the
//! boundary `H + r = N + M`: once the hidden layer saturates, adding units
//! leaves the realizable map (and hence the threshold) unchanged, and the
//! regime-1 expression at the boundary collapses to `4NM/8 = NM/2`. The
//! boundary always has even parity, so no parity correction survives.
//! [`volume_scaling_lambda`](crate::volume::volume_scaling_lambda) provides
//! an independent Monte Carlo check of this extension.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rational::Rational;
use crate::shape::{CategoricalShape, PcbmShape, RrrShape};

/// Which of the four reduced-rank regimes a shape falls in. Exactly one
/// applies to every valid shape: the three strict conditions are pairwise
/// incompatible under `r <= min(n_in, h, m_out)`, and regime 1 is their
/// common complement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RrrRegime {
    Balanced { even: bool },
    OutputHeavy,
    InputHeavy,
    HiddenHeavy,
}

fn rrr_regime(shape: &RrrShape) -> RrrRegime {
    let (n, h, m, r) = (shape.n_in, shape.h, shape.m_out, shape.r);
    if n + h < m + r {
        RrrRegime::OutputHeavy
    } else if m + h < n + r {
        RrrRegime::InputHeavy
    } else if n + m < h + r {
        RrrRegime::HiddenHeavy
    } else {
        RrrRegime::Balanced {
            even: (n + m + h + r) % 2 == 0,
        }
    }
}

/// Learning coefficient of reduced-rank regression.
pub fn rlct_rrr(shape: &RrrShape) -> Rational {
    let n = shape.n_in as i64;
    let h = shape.h as i64;
    let m = shape.m_out as i64;
    let r = shape.r as i64;
    let value = match rrr_regime(shape) {
        RrrRegime::Balanced { even } => {
            let core = 2 * (h + r) * (n + m) - (n - m) * (n - m) - (h + r) * (h + r);
            Rational::new(if even { core } else { core + 1 }, 8)
        }
        RrrRegime::OutputHeavy => Rational::new(h * n + r * (m - h), 2),
        RrrRegime::InputHeavy => Rational::new(h * m + r * (n - h), 2),
        RrrRegime::HiddenHeavy => Rational::new(n * m, 2),
    };
    value.expect("denominator is a nonzero literal")
}

/// Learning coefficient of a fully supervised concept bottleneck:
/// `lambda = H (M + N) / 2`. Supervision identifies every hidden unit, so
/// the model is regular and the coefficient is half the parameter count.
pub fn rlct_cbm(n_in: usize, h: usize, m_out: usize) -> Result<Rational> {
    if n_in == 0 || h == 0 || m_out == 0 {
        return Err(Error::validation(format!(
            "cbm dimensions must be positive: n_in={n_in}, h={h}, m_out={m_out}"
        )));
    }
    Ok(Rational::new(h as i64 * (m_out + n_in) as i64, 2).expect("den 2"))
}

fn supervised_half_term(h2: usize, m_eff: usize, n_in: usize) -> Rational {
    Rational::new(h2 as i64 * (m_eff + n_in) as i64, 2).expect("den 2")
}

/// Upper bound on the learning coefficient of a partial concept bottleneck:
/// the tacit block contributes a reduced-rank coefficient and the supervised
/// block contributes its regular half-dimension,
///
/// ```text
///     lambda_P <= lambda_rrr(N, H1, M, r') + H2 (M + N) / 2.
/// ```
///
/// With `h1 = 0` this reduces exactly to [`rlct_cbm`].
pub fn rlct_pcbm_upper(shape: &PcbmShape) -> Rational {
    let supervised = supervised_half_term(shape.h2, shape.m_out, shape.n_in);
    if shape.h1 == 0 {
        return supervised;
    }
    let tacit = RrrShape::new(shape.n_in, shape.h1, shape.m_out, shape.r_prime)
        .expect("PcbmShape validation implies a valid tacit rrr shape");
    rlct_rrr(&tacit) + supervised
}

/// Upper bound for mixed real/categorical outputs and concepts. Categorical
/// blocks lose one output dimension to the simplex constraint; concepts
/// count by their raw dimension:
///
/// ```text
///     M_eff = M_real + M_cat - 1   (M_cat >= 1; M_eff = M_real otherwise)
///     lambda <= lambda_rrr(N, H1, M_eff, r') + (H2_real + H2_cat)(M_eff + N) / 2.
/// ```
pub fn rlct_pcbm_upper_categorical(shape: &CategoricalShape) -> Rational {
    let m_eff = CategoricalShape::effective_outputs(shape.m_real, shape.m_cat);
    let supervised = supervised_half_term(shape.h2_total(), m_eff, shape.n_in);
    if shape.h1 == 0 {
        return supervised;
    }
    let tacit = RrrShape::new(shape.n_in, shape.h1, m_eff, shape.r_prime)
        .expect("CategoricalShape validation implies a valid tacit rrr shape");
    rlct_rrr(&tacit) + supervised
}

/// Coefficient of the `1/n` lower bound on the generalization gap between a
/// full and a partial bottleneck of the same total width:
///
/// ```text
///     G_cbm - G_pcbm >= { H1 (M + N) / 2 - lambda_rrr(N, H1, M, r') } / n + o(1/n).
/// ```
///
/// Nonnegative because a reduced-rank coefficient never exceeds the regular
/// half-dimension of its block; zero when `h1 = 0` (nothing is tacit).
pub fn gen_error_gap_lower(shape: &PcbmShape) -> Rational {
    if shape.h1 == 0 {
        return Rational::zero();
    }
    let tacit = RrrShape::new(shape.n_in, shape.h1, shape.m_out, shape.r_prime)
        .expect("PcbmShape validation implies a valid tacit rrr shape");
    let regular = supervised_half_term(shape.h1, shape.m_out, shape.n_in);
    regular - rlct_rrr(&tacit)
}

/// The `lambda log n` free-energy penalty at sample size `n`.
#[derive(Debug, Clone, Serialize)]
pub struct FreeEnergyPenalty {
    pub log_n_term: f64,
    /// What the caller still has to add to obtain the full free energy.
    pub note: &'static str,
}

/// Evaluates `lambda * log n`. The empirical-loss term `n * S_n` depends on
/// the data and must be added by the caller; `O_p(log log n)` fluctuations
/// are omitted.
pub fn free_energy_penalty(lambda: Rational, n: usize) -> Result<FreeEnergyPenalty> {
    if n < 2 {
        return Err(Error::validation(format!(
            "free energy penalty needs n >= 2 so that log n > 0: n={n}"
        )));
    }
    Ok(FreeEnergyPenalty {
        log_n_term: lambda.to_f64() * (n as f64).ln(),
        note: "add n*S_n for the full free energy; O_p(log log n) terms omitted",
    })
}
