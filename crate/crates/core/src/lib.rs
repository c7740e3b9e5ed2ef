//! Constraint management for pre-stabilized nonlinear loops by reference
//! governing.
//!
//! Three governors share one plant abstraction:
//!
//! * [`mcg`]: the exact multi-timestep command governor, a soft-constrained
//!   nonlinear program over the future command sequence, solved by SQP.
//! * the naive network governor: a feedforward net ([`nn`]) imitating the
//!   exact governor, applied open-loop.
//! * [`nnmcg`]: the network output used as a nominal point for a first-order
//!   sensitivity expansion whose remainder is bounded by a calibrated
//!   curvature constant, giving a convex QCQP per step.
//!
//! [`sim`] closes the loop and benchmarks the three; [`cli`] wires the
//! collect/train/calibrate/run/benchmark pipeline behind one JSON config.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        let tol: f64 = $tol;
        assert!((a - b).abs() <= tol, "{} vs {} (tol {:e})", a, b, tol);
    }};
}

pub mod cli;
pub mod error;
pub mod mcg;
pub mod nn;
pub mod nnmcg;
pub mod optim;
pub mod plant;
pub mod sensitivity;
pub mod sim;

pub use error::{GovernError, Result};
