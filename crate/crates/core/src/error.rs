use thiserror::Error;

/// Library-wide error type.
///
/// `Validation` carries a message naming the violated constraint; the CLI
/// maps it to exit code 2. `TooManyFlagged` maps to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("chain diverged: n*L_n = {nll:.3e} exceeded the divergence guard at step {step}")]
    Diverged { nll: f64, step: usize },

    #[error(
        "widen thresholds: only {hits} samples fell below the smallest threshold {threshold:.3e} \
         (need at least {needed}); raise n_samples or use larger thresholds"
    )]
    WidenThresholds {
        hits: u64,
        needed: u64,
        threshold: f64,
    },

    #[error("ground truth construction failed: could not reach rank {target} in {attempts} attempts")]
    RankNotReached { target: usize, attempts: usize },

    #[error("{fraction:.1}% of sweep records were flagged as unreliable (threshold 20%)")]
    TooManyFlagged { fraction: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
