//! The black-box system contract and the disturbed inverted pendulum.

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_3;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::grid::Bounds;

/// Discrete-time system `x' = f(x, u, d)` with a margin `g(x)` that is
/// negative exactly on the failure set.
///
/// Solvers, filters, learners and the harness only talk to systems through
/// this trait.
pub trait BlackBoxSystem: Sync {
    fn state_dim(&self) -> usize;
    fn control_box(&self) -> &Bounds;
    fn dstb_box(&self) -> &Bounds;

    /// Raw transition. Callers guarantee dimensions and box membership.
    fn transition(&self, x: &[f64], u: &[f64], d: &[f64], next: &mut [f64]);

    fn margin(&self, x: &[f64]) -> f64;

    /// Checked transition.
    fn step(&self, x: &[f64], u: &[f64], d: &[f64], next: &mut [f64]) -> Result<()> {
        if x.len() != self.state_dim() || next.len() != self.state_dim() {
            return Err(contract!("state dimension {} expected, got {}", self.state_dim(), x.len()));
        }
        if !self.control_box().contains(u) {
            return Err(contract!("control {u:?} outside the control box"));
        }
        if !self.dstb_box().contains(d) {
            return Err(contract!("disturbance {d:?} outside the disturbance box"));
        }
        self.transition(x, u, d, next);
        Ok(())
    }

    fn step_vec(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        let mut next = alloc::vec![0.0; self.state_dim()];
        self.step(x, u, d, &mut next)?;
        Ok(next)
    }
}

impl<S: BlackBoxSystem + ?Sized> BlackBoxSystem for &S {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn control_box(&self) -> &Bounds {
        (**self).control_box()
    }
    fn dstb_box(&self) -> &Bounds {
        (**self).dstb_box()
    }
    fn transition(&self, x: &[f64], u: &[f64], d: &[f64], next: &mut [f64]) {
        (**self).transition(x, u, d, next)
    }
    fn margin(&self, x: &[f64]) -> f64 {
        (**self).margin(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumConfig {
    pub dt: f64,
    pub substeps: usize,
    pub theta_failure: f64,
    pub control_bound: f64,
    pub dstb_bound: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self { dt: 0.01, substeps: 1, theta_failure: FRAC_PI_3, control_bound: 20.0, dstb_bound: 2.0 }
    }
}

impl PendulumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(config_err!("system.dt must be positive, got {}", self.dt));
        }
        if self.substeps == 0 {
            return Err(config_err!("system.substeps must be at least 1"));
        }
        if !(self.theta_failure > 0.0 && self.theta_failure.is_finite()) {
            return Err(config_err!("system.theta_failure must be positive"));
        }
        if !(self.control_bound > 0.0 && self.control_bound.is_finite()) {
            return Err(config_err!("system.control_bound must be positive"));
        }
        if !(self.dstb_bound >= 0.0 && self.dstb_bound.is_finite()) {
            return Err(config_err!("system.dstb_bound must be non-negative"));
        }
        Ok(())
    }
}

/// Continuous-time pendulum vector field: `(omega, 10 sin(theta) + u/2 + F/2 cos(theta))`.
#[inline]
pub fn pendulum_derivative(theta: f64, omega: f64, u: f64, f: f64) -> (f64, f64) {
    let (s, c) = libm::sincos(theta);
    (omega, 10.0 * s + 0.5 * u + 0.5 * f * c)
}

/// Disturbed inverted pendulum with state `(theta, omega)`, scalar torque `u`
/// and scalar disturbance force `F`.
#[derive(Debug, Clone)]
pub struct Pendulum {
    config: PendulumConfig,
    control_box: Bounds,
    dstb_box: Bounds,
}

impl Pendulum {
    pub fn new(config: PendulumConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            control_box: Bounds::interval(-config.control_bound, config.control_bound)?,
            dstb_box: Bounds::interval(-config.dstb_bound, config.dstb_bound)?,
            config,
        })
    }

    pub fn canonical() -> Self {
        Self::new(PendulumConfig::default()).expect("default pendulum config is valid")
    }

    pub fn config(&self) -> &PendulumConfig {
        &self.config
    }

    /// Same pendulum with the disturbance box collapsed to `{0}`.
    pub fn without_disturbance(&self) -> Self {
        Self::new(PendulumConfig { dstb_bound: 0.0, ..self.config }).expect("valid config")
    }

    /// RK4 with zero-order hold over `dt`, split into `substeps` steps.
    #[inline]
    pub fn integrate(&self, theta: f64, omega: f64, u: f64, f: f64) -> (f64, f64) {
        let h = self.config.dt / self.config.substeps as f64;
        let (mut th, mut om) = (theta, omega);
        for _ in 0..self.config.substeps {
            let (a1, b1) = pendulum_derivative(th, om, u, f);
            let (a2, b2) = pendulum_derivative(th + 0.5 * h * a1, om + 0.5 * h * b1, u, f);
            let (a3, b3) = pendulum_derivative(th + 0.5 * h * a2, om + 0.5 * h * b2, u, f);
            let (a4, b4) = pendulum_derivative(th + h * a3, om + h * b3, u, f);
            th += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            om += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        }
        (th, om)
    }

    /// `theta_failure - |theta|`.
    #[inline]
    pub fn margin_of(&self, theta: f64) -> f64 {
        self.config.theta_failure - theta.abs()
    }

    /// Control-affine model terms `(f0(x), g_u, g_d(x))` with
    /// `omega_dot = f0 + g_u u + g_d F`, for model-based baselines only.
    pub fn affine_terms(&self, theta: f64) -> (f64, f64, f64) {
        (10.0 * libm::sin(theta), 0.5, 0.5 * libm::cos(theta))
    }
}

impl BlackBoxSystem for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_box(&self) -> &Bounds {
        &self.control_box
    }

    fn dstb_box(&self) -> &Bounds {
        &self.dstb_box
    }

    #[inline]
    fn transition(&self, x: &[f64], u: &[f64], d: &[f64], next: &mut [f64]) {
        let (th, om) = self.integrate(x[0], x[1], u[0], d[0]);
        next[0] = th;
        next[1] = om;
    }

    #[inline]
    fn margin(&self, x: &[f64]) -> f64 {
        self.margin_of(x[0])
    }
}
