//! Visual-inertial state estimation on synthetic data.
//!
//! The crate covers the whole chain from raw IMU samples to globally
//! referenced poses:
//!
//! - [`quat`]: Hamilton quaternions, SO(3) maps and the body-frame update rule.
//! - [`preint`]: mid-point IMU preintegration with covariance and bias Jacobian.
//! - [`align`]: visual-inertial initialization (velocity, gravity, scale).
//! - [`factors`]: IMU and inverse-depth vision residuals with analytic Jacobians.
//! - [`solver`]: manifold Levenberg-Marquardt and Schur-complement marginalization.
//! - [`window`]: the sliding-window estimator.
//! - [`global`]: pose-graph fusion of local odometry with GPS.
//! - [`sim`]: deterministic trajectory and sensor simulator.
//! - [`io`] and [`config`]: file formats and the JSON configuration schema.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod check;
pub mod config;
pub mod error;
pub mod factors;
pub mod global;
pub mod io;
pub mod preint;
pub mod quat;
pub mod sim;
pub mod solver;
pub mod state;
pub mod window;

pub use error::{Error, Result};
pub use quat::{Pose, UnitQuat, Vec3};
pub use state::FrameState;

/// Default gravity magnitude, m/s².
pub const GRAVITY: f64 = 9.81;
