//! Empirical-Bayes signal detection for spontaneous-reporting contingency
//! tables: disproportionality likelihoods, mixture priors fit by ECM, the
//! Koenker-Mizera style nonparametric MLE, a log-spline exponential-family
//! prior, MGPS and BCPNN baselines, and the simulation/evaluation harness
//! behind the `pvsig` command-line tool.

pub mod ecm;
pub mod efron;
pub mod error;
pub mod grid;
pub mod km;
pub mod mixture;
pub mod opt;
pub mod quad;
pub mod special;
pub mod tables;

pub use error::{Error, Result};
