//! Variational Poisson-lognormal PCA: a low-rank latent Gaussian layer
//! under count (or other exponential-family) observations, fitted by
//! maximizing a variational lower bound, with covariates, offsets, missing
//! entries, rank selection and factor-map visualization.

pub mod elbo;
pub mod error;
pub mod model;
pub mod nef;
pub mod optim;
pub mod quadrature;
pub mod selection;
pub mod simulate;
pub mod viz;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{PlnError, Result};
pub use model::{CountTable, Design, FitResult, FitStatus, ModelParams, VariationalState};
pub use nef::Family;
pub use optim::{fit_from, fit_rank, fit_rank_scan, Method, OptimConfig, RankScanResult};
pub use selection::{Criteria, Criterion};
pub use simulate::{sample, SimSpec};
pub use viz::FactorMap;
