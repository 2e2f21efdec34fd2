//! Robust Q-CBF synthesis and runtime safety filtering.
//!
//! The crate is `no_std` (with `alloc`) and contains every algorithm of the
//! toolkit:
//!
//! * [`grid`]: uniform grids, boxes and multilinear scalar fields.
//! * [`classk`]: class-K maps used as barrier decay rates.
//! * [`dynamics`]: the black-box system contract and the disturbed inverted
//!   pendulum benchmark.
//! * [`isaacs`]: grid dynamic programming for the discrete-time Isaacs
//!   equation, the Q-lift, fallback policy and worst-case disturbances.
//! * [`filters`]: the robust Q-CBF filter, the least-restrictive filter, the
//!   continuous-time barrier baselines and the PD task controller.
//! * [`learn`]: a small neural stack and adversarial actor-critic training of
//!   the safety critic, plus best-response disturbance training.
//! * [`harness`]: rollouts, boundary sampling and safe-set metrics.
//!
//! IO, configuration files and the command-line interface live in the `qcbf`
//! companion crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod classk;
pub mod dynamics;
mod error;
pub mod filters;
pub mod grid;
pub mod harness;
pub mod isaacs;
pub mod learn;

pub use classk::{Alpha, ClassKMap};
pub use dynamics::{BlackBoxSystem, Pendulum, PendulumConfig};
pub use error::{Error, Result};
pub use grid::{Axis, Bounds, Discretization, FieldMeta, Grid, ScalarField, ValueFunction};
pub use isaacs::{SolveConfig, SolveDiagnostics, SolveMode};
