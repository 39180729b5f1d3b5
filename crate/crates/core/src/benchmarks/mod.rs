//! Benchmark forecasters: naive with residual bootstrap, LEAR (per-hour
//! lasso over several calibration windows) and quantile regression on point
//! forecasts (QRA / QRM).

pub mod bootstrap;
pub mod lasso;
pub mod lear;
pub mod naive;
pub mod qra;
pub mod quantile_reg;

use thiserror::Error;

use crate::distributions::DistError;
use crate::market_data::DataError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("bootstrap needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("target has zero variance; only an intercept can be fitted")]
    DegenerateTarget,
    #[error("quantile level {0} outside (0, 1)")]
    QuantileLevel(f64),
    #[error("need more than {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("day {t} needs a {window}-day window plus lag days")]
    Window { t: usize, window: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("linear algebra failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;
