//! Delay-resilient teleoperation core.
//!
//! Everything in this crate is pure computation over value types: the planar
//! arm plant, the stochastic delay channel, a small neural substrate with
//! exact reverse-mode gradients, the anchored autoregressive LSTM estimator,
//! the computed-torque controller and its baselines, the teleoperation
//! environment, and the residual soft actor-critic agent. File formats, the
//! command line and the live server live in the `teleop` crate.
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]
#![deny(rust_2018_idioms)]
#![warn(missing_debug_implementations)]
// std's inherent float methods shadow num_traits::Float in unit-test builds
#![cfg_attr(test, allow(unused_imports))]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod arm;
pub mod control;
pub mod delay;
pub mod env;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod sac;
pub mod trajectory;

pub use error::{Error, Result};

/// Control period used throughout: 250 Hz.
pub const DEFAULT_DT: f64 = 0.004;

/// Converts a time in seconds to the nearest control tick.
///
/// Ties round up (12.5 ticks becomes 13).
pub fn to_ticks(seconds: f64, dt: f64) -> i64 {
    #[allow(unused_imports)]
    use num_traits::Float;
    // 1e-9 absorbs representation error of quotients like 0.05 / 0.004
    (seconds / dt + 0.5 + 1e-9).floor() as i64
}
