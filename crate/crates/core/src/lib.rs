//! Simulator for federated optimization with smoothed normalization and
//! error feedback (Fed-α-NormEC), its DP-FedAvg baseline, and numeric
//! evaluation of the accompanying convergence bounds.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the double-precision instantiation used by the harness.

// `!(a < b)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod fed_core;
pub mod harness;
pub mod linalg;
pub mod local_ops;
pub mod privacy;
pub mod problems;
pub mod scalar;
pub mod theory;
pub mod vecmath;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vector64 = vecmath::Vector<f64>;
pub type Vector32 = vecmath::Vector<f32>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type FederationProblem64 = problems::FederationProblem<f64>;
pub type ClientProblem64 = problems::ClientProblem<f64>;
pub type RunConfig64 = fed_core::RunConfig<f64>;
pub type Simulation64<'a> = fed_core::Simulation<'a, f64>;
pub type Trajectory64 = fed_core::Trajectory<f64>;
pub type FedAvgConfig64 = baselines::FedAvgConfig<f64>;
pub type BoundReport64 = theory::BoundReport<f64>;
pub type Schedule64 = privacy::Schedule<f64>;
