//! Causally masked probabilistic forecasting for multivariate time-series
//! anomaly detection and root-cause attribution.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod graph;
pub mod model;

pub use error::{CgtError, Result};
pub mod seed;
pub mod train;
pub mod scoring;
pub mod safety;
pub mod threshold;
pub mod metrics;
pub mod synth;
pub mod attribution;
pub mod config;
pub mod pipeline;
