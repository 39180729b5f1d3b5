//! Probabilistic day-ahead electricity price forecasting.

// negated float comparisons are used on purpose to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmarks;
pub mod distributions;
pub mod dmlp;
pub mod ensembling;
pub mod evaluation;
pub mod harness;
pub mod market_data;
pub mod matrix;
pub mod neural;
pub mod scalar;
pub mod special;

pub use scalar::Scalar;

pub type DistSpec64 = distributions::DistSpec<f64>;
pub type DistSpec32 = distributions::DistSpec<f32>;
pub type Network64 = neural::Network<f64>;
pub type Network32 = neural::Network<f32>;
pub type Matrix64 = matrix::Matrix<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
