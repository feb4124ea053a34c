//! Numerical laboratory for entropy-regularised finite MDPs.
//!
//! The crate evaluates soft value functions exactly, integrates the coupled
//! linear-critic / Fisher–Rao-actor flow and its discrete two-timescale
//! counterpart, and checks the stability and convergence inequalities of the
//! flow as runtime certificates against simulated trajectories.
//!
//! Every routine is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix `f64`, which is what the CLI and the certificate suite use.

// NaN must fail validity checks, so guards are written as `!(x > y)`
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor;
pub mod analysis;
pub mod critic;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod mdp;
pub mod occupancy;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Mdp = mdp::FiniteMdp<f64>;
pub type Features = mdp::FeatureMap<f64>;
pub type PolicyF64 = mdp::Policy<f64>;
pub type Schedule = flow::TimescaleSchedule;
pub type TrajectoryF64 = flow::Trajectory<f64>;
pub type Constants = analysis::BoundConstants;
