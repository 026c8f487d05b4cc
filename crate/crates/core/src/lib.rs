//! Uncertainty-aware stochastic model predictive control.
//!
//! Gaussian-mixture agent forecasts feed a chance-constrained planner whose
//! collision constraints use the exact keep-out region of each predicted
//! Gaussian; a closed-loop simulator and metric suite evaluate the result.

pub mod error;
pub mod geometry;
pub mod metrics;
pub mod planner;
pub mod prediction;
pub mod route;
pub mod simulation;
pub mod solver;

pub use error::{Error, Result};
