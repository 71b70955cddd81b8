//! Probabilistic calibration of compartmental attitude models to survey
//! time series.
//!
//! Surveys are resampled from their multinomial sampling distribution, the
//! net-flow ODE model is fitted to each resampled series by Nelder-Mead
//! under a chi-square goodness-of-fit objective, and the best-fitting
//! parameter sets are combined into 95 % model confidence bands and forward
//! predictions.

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod optimize;
pub mod pipeline;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
