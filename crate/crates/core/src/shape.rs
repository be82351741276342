//! Shape descriptors for the three model families.
//!
//! A linear concept bottleneck network maps inputs through a hidden layer of
//! `H` units: outputs `y = A B x` with `A` of size `M x H` and `B` of size
//! `H x N`. Concept supervision observes a slice of the hidden layer. The
//! shapes below carry the dimensions plus the rank of the relevant true
//! weight product, validated eagerly so downstream formulas can assume them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced-rank regression shape: model `y = U V x` with `U: m_out x h`,
/// `V: h x n_in`, and a true product of rank `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RrrShape {
    pub n_in: usize,
    pub h: usize,
    pub m_out: usize,
    pub r: usize,
}

impl RrrShape {
    pub fn new(n_in: usize, h: usize, m_out: usize, r: usize) -> Result<Self> {
        if n_in == 0 || h == 0 || m_out == 0 {
            return Err(Error::validation(format!(
                "rrr shape dimensions must be positive: n_in={n_in}, h={h}, m_out={m_out}"
            )));
        }
        if r > n_in.min(m_out) || r > h {
            return Err(Error::validation(format!(
                "rank must satisfy r <= min(n_in, m_out) and r <= h: \
                 r={r}, n_in={n_in}, h={h}, m_out={m_out}"
            )));
        }
        Ok(RrrShape { n_in, h, m_out, r })
    }

    /// Number of free parameters, `h * (n_in + m_out)`.
    pub fn param_count(&self) -> usize {
        self.h * (self.n_in + self.m_out)
    }
}

/// Partial concept bottleneck shape. The hidden layer splits into `h1` tacit
/// units (unsupervised) and `h2` supervised units; `r_prime` is the rank of
/// the true tacit product `A1 B1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PcbmShape {
    pub n_in: usize,
    pub h1: usize,
    pub h2: usize,
    pub m_out: usize,
    pub r_prime: usize,
}

impl PcbmShape {
    pub fn new(n_in: usize, h1: usize, h2: usize, m_out: usize, r_prime: usize) -> Result<Self> {
        if n_in == 0 || m_out == 0 {
            return Err(Error::validation(format!(
                "pcbm shape dimensions must be positive: n_in={n_in}, m_out={m_out}"
            )));
        }
        if h1 + h2 == 0 {
            return Err(Error::validation(
                "pcbm shape needs a nonempty hidden layer: h1 + h2 >= 1",
            ));
        }
        if r_prime > n_in.min(h1).min(m_out) {
            return Err(Error::validation(format!(
                "rank must satisfy r_prime <= min(n_in, h1, m_out): \
                 r_prime={r_prime}, n_in={n_in}, h1={h1}, m_out={m_out}"
            )));
        }
        Ok(PcbmShape {
            n_in,
            h1,
            h2,
            m_out,
            r_prime,
        })
    }

    /// Full concept bottleneck: every hidden unit supervised.
    pub fn cbm(n_in: usize, h: usize, m_out: usize) -> Result<Self> {
        Self::new(n_in, 0, h, m_out, 0)
    }

    pub fn hidden_total(&self) -> usize {
        self.h1 + self.h2
    }

    /// Number of free parameters, `(h1 + h2) * (n_in + m_out)`.
    pub fn param_count(&self) -> usize {
        self.hidden_total() * (self.n_in + self.m_out)
    }

    /// Stable identifier used in sweep records and file names.
    pub fn id(&self) -> String {
        format!(
            "pcbm-n{}-h1_{}-h2_{}-m{}-r{}",
            self.n_in, self.h1, self.h2, self.m_out, self.r_prime
        )
    }
}

/// Partial concept bottleneck with mixed real/categorical outputs and
/// concepts. A categorical block with `k` levels contributes `k - 1` free
/// output dimensions (the level probabilities are constrained to a simplex);
/// real blocks contribute their dimension unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CategoricalShape {
    pub n_in: usize,
    pub h1: usize,
    pub h2_real: usize,
    pub h2_cat: usize,
    pub m_real: usize,
    pub m_cat: usize,
    pub r_prime: usize,
}

impl CategoricalShape {
    pub fn new(
        n_in: usize,
        h1: usize,
        h2_real: usize,
        h2_cat: usize,
        m_real: usize,
        m_cat: usize,
        r_prime: usize,
    ) -> Result<Self> {
        if n_in == 0 {
            return Err(Error::validation("categorical shape needs n_in >= 1"));
        }
        if h1 + h2_real + h2_cat == 0 {
            return Err(Error::validation(
                "categorical shape needs a nonempty hidden layer: h1 + h2_real + h2_cat >= 1",
            ));
        }
        let m_eff = Self::effective_outputs(m_real, m_cat);
        if m_eff == 0 {
            return Err(Error::validation(format!(
                "categorical shape needs at least one free output dimension: \
                 m_real={m_real}, m_cat={m_cat}"
            )));
        }
        if r_prime > n_in.min(h1).min(m_eff) {
            return Err(Error::validation(format!(
                "rank must satisfy r_prime <= min(n_in, h1, effective outputs): \
                 r_prime={r_prime}, n_in={n_in}, h1={h1}, effective outputs={m_eff}"
            )));
        }
        Ok(CategoricalShape {
            n_in,
            h1,
            h2_real,
            h2_cat,
            m_real,
            m_cat,
            r_prime,
        })
    }

    /// Free output dimensions: the simplex constraint removes one dimension
    /// from a categorical block, none from an all-real output.
    pub fn effective_outputs(m_real: usize, m_cat: usize) -> usize {
        if m_cat > 0 {
            m_real + m_cat - 1
        } else {
            m_real
        }
    }

    pub fn h2_total(&self) -> usize {
        self.h2_real + self.h2_cat
    }
}
