//! Coarse-to-fine stochastic human motion forecasting for human-robot
//! collaboration: a one-step coarse predictor whose samples are corrected by
//! a flow-matching residual refiner conditioned on the robot's motion.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod flow;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod refiner;
pub mod synth;

pub use error::{Error, Result};
