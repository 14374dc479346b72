//! Axial neutron-flux surrogate models with predictive uncertainty.
//!
//! The crate covers the whole modelling chain for assembly-wise axial flux
//! profiles indexed by (control-bank position, axial location):
//!
//! - [`synthdata`]: a ground-truth flux model and a copper-wire measurement
//!   campaign simulator (Poisson counting noise, scan-order decay, defects).
//! - [`preprocess`]: decay correction, low-count cycle rejection,
//!   Savitzky-Golay smoothing, z-score normalization, dataset assembly and
//!   seeded train/test/validation partitioning.
//! - [`nncore`]: dense feedforward networks, analytic backpropagation, Adam,
//!   and a training loop with early stopping and LR-on-plateau.
//! - [`mcd`]: dropout networks and Monte Carlo Dropout prediction.
//! - [`bnnvi`]: mean-field Gaussian Bayesian networks trained on the
//!   variational free energy.
//! - [`hpo`]: random search, grid search and the two-stage combination.
//! - [`evalmetrics`]: NRMSE, R², interval coverage, box-plot summaries and
//!   bank-sensitivity reports.
//!
//! Monte Carlo loops (prediction passes, campaign generation, search trials)
//! run on rayon when the `parallel` feature is enabled. Every parallel loop
//! derives one RNG sub-stream per fixed-size work item, so results are
//! bit-identical between [`Exec::Parallel`] and [`Exec::Sequential`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bnnvi;
pub mod error;
pub mod evalmetrics;
pub mod exec;
pub mod hpo;
pub mod mcd;
pub mod modelio;
pub mod nncore;
pub mod predictive;
pub mod preprocess;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
pub use exec::Exec;
pub use predictive::PredictiveDistribution;
