//! Learning coefficients and Bayesian generalization experiments for linear
//! concept bottleneck models.
//!
//! A linear concept bottleneck model (CBM) predicts outputs `y = A B x`
//! through a hidden layer whose units are supervised by concept labels
//! `c = B x`; a *partial* CBM (PCBM) supervises only the last `H2` of the
//! `H = H1 + H2` hidden units. Supervision changes the singularity structure
//! of the model, and with it the Bayes free energy and generalization error.
//!
//! The crate has two halves that check each other:
//!
//! * exact closed forms for the learning coefficient `lambda` in
//!   [`rlct`] (reduced-rank regression, CBM, PCBM upper bound), and
//! * a simulation pipeline — Gaussian model + dataset generation in
//!   [`model`], a Langevin posterior sampler in [`sampler`], generalization
//!   error / `lambda` estimators in [`estimators`], a brute-force
//!   volume-scaling oracle in [`volume`], and sweep orchestration in
//!   [`experiment`] — that measures `lambda` empirically via
//!   `E[G_n] ~ lambda / n`.

pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod model;
pub mod rational;
pub mod rlct;
pub mod sampler;
pub mod seed;
pub mod shape;
pub mod svg;
pub mod volume;

pub use error::{Error, Result};
pub use rational::Rational;
pub use shape::{CategoricalShape, PcbmShape, RrrShape};
