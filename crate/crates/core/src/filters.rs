//! Runtime safety filters and the PD task controller.
//!
//! The robust Q-CBF filter picks the control closest to the task input that
//! satisfies `min_d Q(x, u, d) >= beta(V(x))`; the least-restrictive filter
//! passes the task input when its worst-case successor stays in the safe set
//! and otherwise switches to the fallback policy. Both only see a
//! [`QCertificate`], so they run unchanged on a grid certificate or a neural
//! one. The continuous-time baselines use explicit model terms of the
//! pendulum.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::classk::{Alpha, ClassKMap};
use crate::dynamics::{BlackBoxSystem, Pendulum};
use crate::error::{config_err, Result};
use crate::grid::{Bounds, Discretization, ScalarField, ValueFunction, MAX_DIM};
use crate::isaacs::Game;

/// Bisection tolerance of the continuous refinement step.
pub const REFINE_RESOLUTION: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub u_exec: Vec<f64>,
    /// `u_exec != u_task`.
    pub intervened: bool,
    /// Constraint value minus its threshold at `u_exec`.
    pub constraint_margin: f64,
    pub feasible: bool,
    pub fallback_used: bool,
    /// The state lies outside the certificate's 0-superlevel set.
    pub outside_certificate: bool,
}

pub trait SafetyFilter {
    fn filter(&self, x: &[f64], u_task: &[f64]) -> FilterOutput;
}

impl<F: SafetyFilter + ?Sized> SafetyFilter for &F {
    fn filter(&self, x: &[f64], u_task: &[f64]) -> FilterOutput {
        (**self).filter(x, u_task)
    }
}

/// Access to a safety value `V` and its worst-case Q-lift.
pub trait QCertificate {
    fn value(&self, x: &[f64]) -> f64;

    /// `min_d Q(x, u, d)` (or a plug-in surrogate of it).
    fn worst_q(&self, x: &[f64], u: &[f64]) -> f64;

    /// `min_d V(f(x, u, d))`, the least-restrictive monitor.
    fn worst_next_value(&self, x: &[f64], u: &[f64]) -> f64 {
        self.worst_q(x, u)
    }

    /// `argmax_u min_d Q(x, u, d)` with its value.
    fn fallback(&self, x: &[f64]) -> (Vec<f64>, f64);
}

/// Grid value field plus black-box system and discretized boxes.
pub struct GridCertificate<'a, S: BlackBoxSystem + ?Sized> {
    pub field: &'a ScalarField,
    pub game: Game<'a, S>,
}

impl<'a, S: BlackBoxSystem + ?Sized> GridCertificate<'a, S> {
    pub fn new(field: &'a ScalarField, game: Game<'a, S>) -> Self {
        Self { field, game }
    }
}

impl<S: BlackBoxSystem + ?Sized> QCertificate for GridCertificate<'_, S> {
    fn value(&self, x: &[f64]) -> f64 {
        self.field.eval(x).0
    }

    fn worst_q(&self, x: &[f64], u: &[f64]) -> f64 {
        self.game.robust_q_index(self.field, x, u).0
    }

    fn worst_next_value(&self, x: &[f64], u: &[f64]) -> f64 {
        self.game.worst_next_value(self.field, x, u).0
    }

    fn fallback(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let (i, v) = self.game.fallback_index(self.field, x);
        (self.game.controls.get(i).to_vec(), v)
    }
}

/// Uncertainty-free grid certificate: `Q(x, u) = min{ g(x), V(f(x, u, d0)) }`
/// for a single fixed disturbance `d0`.
pub struct NominalCertificate<'a, S: BlackBoxSystem + ?Sized> {
    pub field: &'a ScalarField,
    pub system: &'a S,
    pub controls: Discretization,
    pub d0: Vec<f64>,
}

impl<S: BlackBoxSystem + ?Sized> NominalCertificate<'_, S> {
    fn next_value(&self, x: &[f64], u: &[f64]) -> f64 {
        let mut next = [0.0; MAX_DIM];
        let next = &mut next[..x.len()];
        self.system.transition(x, u, &self.d0, next);
        self.field.eval(next).0
    }
}

impl<S: BlackBoxSystem + ?Sized> QCertificate for NominalCertificate<'_, S> {
    fn value(&self, x: &[f64]) -> f64 {
        self.field.eval(x).0
    }

    fn worst_q(&self, x: &[f64], u: &[f64]) -> f64 {
        self.system.margin(x).min(self.next_value(x, u))
    }

    fn worst_next_value(&self, x: &[f64], u: &[f64]) -> f64 {
        self.next_value(x, u)
    }

    fn fallback(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, u) in self.controls.iter().enumerate() {
            let q = self.worst_q(x, u);
            let norm: f64 = u.iter().map(|c| c * c).sum();
            if best.is_none_or(|(_, bq, bn)| q > bq || (q == bq && norm < bn)) {
                best = Some((i, q, norm));
            }
        }
        let (i, q, _) = best.expect("controls are non-empty");
        (self.controls.get(i).to_vec(), q)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Robust Q-CBF filter over any certificate.
pub struct QcbfFilter<C> {
    pub certificate: C,
    pub beta: ClassKMap,
    pub controls: Discretization,
    pub control_box: Bounds,
}

impl<C: QCertificate> QcbfFilter<C> {
    pub fn new(certificate: C, beta: ClassKMap, controls: Discretization, control_box: Bounds) -> Result<Self> {
        beta.validate()?;
        if controls.is_empty() {
            return Err(config_err!("the Q-CBF filter needs a non-empty control discretization"));
        }
        Ok(Self { certificate, beta, controls, control_box })
    }

    fn fallback_output(&self, x: &[f64], u_task: &[f64], threshold: f64, outside: bool) -> FilterOutput {
        let (u, v) = self.certificate.fallback(x);
        FilterOutput {
            intervened: u.as_slice() != u_task,
            u_exec: u,
            constraint_margin: v - threshold,
            feasible: false,
            fallback_used: true,
            outside_certificate: outside,
        }
    }
}

impl<C: QCertificate> SafetyFilter for QcbfFilter<C> {
    fn filter(&self, x: &[f64], u_task: &[f64]) -> FilterOutput {
        let cert = &self.certificate;
        let v = cert.value(x);
        let threshold = self.beta.apply(v);
        if v < 0.0 {
            return self.fallback_output(x, u_task, threshold, true);
        }
        let mut ut = u_task.to_vec();
        self.control_box.clamp(&mut ut);
        let q_task = cert.worst_q(x, &ut);
        if q_task >= threshold {
            return FilterOutput {
                intervened: ut.as_slice() != u_task,
                u_exec: ut,
                constraint_margin: q_task - threshold,
                feasible: true,
                fallback_used: false,
                outside_certificate: false,
            };
        }
        // Closest feasible discrete control; ties keep the earlier (smaller) one.
        let mut best: Option<(usize, f64)> = None;
        for (i, u) in self.controls.iter().enumerate() {
            let d = dist2(u, &ut);
            if best.is_some_and(|(_, bd)| d >= bd) {
                continue;
            }
            if cert.worst_q(x, u) >= threshold {
                best = Some((i, d));
            }
        }
        let Some((bi, bd)) = best else {
            return self.fallback_output(x, u_task, threshold, false);
        };
        // Bisect on the segment towards the task input. `lo` stays feasible.
        let mut lo = self.controls.get(bi).to_vec();
        let dist = libm::sqrt(bd);
        let reach = if dist > 0.0 { (self.controls.spacing() / dist).min(1.0) } else { 0.0 };
        let mut hi = ut.clone();
        let edge: Vec<f64> = lo.iter().zip(&ut).map(|(l, t)| l + (t - l) * reach).collect();
        if reach < 1.0 {
            if cert.worst_q(x, &edge) >= threshold {
                lo = edge;
            } else {
                hi = edge;
            }
        }
        let mut mid = vec![0.0; lo.len()];
        while libm::sqrt(dist2(&lo, &hi)) > REFINE_RESOLUTION {
            for ((m, l), h) in mid.iter_mut().zip(&lo).zip(&hi) {
                *m = 0.5 * (l + h);
            }
            if cert.worst_q(x, &mid) >= threshold {
                lo.copy_from_slice(&mid);
            } else {
                hi.copy_from_slice(&mid);
            }
        }
        let margin = cert.worst_q(x, &lo) - threshold;
        FilterOutput {
            intervened: lo.as_slice() != u_task,
            u_exec: lo,
            constraint_margin: margin,
            feasible: true,
            fallback_used: false,
            outside_certificate: false,
        }
    }
}

/// Least-restrictive filter: pass `u_task` if `min_d V(f(x, u_task, d)) >= 0`,
/// otherwise apply the fallback.
pub struct LrsfFilter<C> {
    pub certificate: C,
    pub control_box: Bounds,
}

impl<C: QCertificate> SafetyFilter for LrsfFilter<C> {
    fn filter(&self, x: &[f64], u_task: &[f64]) -> FilterOutput {
        let mut ut = u_task.to_vec();
        self.control_box.clamp(&mut ut);
        let outside = self.certificate.value(x) < 0.0;
        let monitor = self.certificate.worst_next_value(x, &ut);
        if monitor >= 0.0 {
            return FilterOutput {
                intervened: ut.as_slice() != u_task,
                u_exec: ut,
                constraint_margin: monitor,
                feasible: true,
                fallback_used: false,
                outside_certificate: outside,
            };
        }
        let (u, _) = self.certificate.fallback(x);
        let margin = self.certificate.worst_next_value(x, &u);
        FilterOutput {
            intervened: u.as_slice() != u_task,
            u_exec: u,
            constraint_margin: margin,
            feasible: !outside,
            fallback_used: true,
            outside_certificate: outside,
        }
    }
}

/// Robust Q-CBF filter on a grid field.
#[allow(clippy::too_many_arguments)]
pub fn qcbf_filter<S: BlackBoxSystem + ?Sized>(
    x: &[f64],
    u_task: &[f64],
    field: &ScalarField,
    system: &S,
    beta: ClassKMap,
    controls: &Discretization,
    dstbs: &Discretization,
) -> Result<FilterOutput> {
    let game = Game::with_discretizations(system, controls.clone(), dstbs.clone())?;
    let f = QcbfFilter::new(GridCertificate::new(field, game), beta, controls.clone(), system.control_box().clone())?;
    Ok(f.filter(x, u_task))
}

/// Uncertainty-free Q-CBF filter with the disturbance fixed at `d0`.
pub fn qcbf_filter_nominal<S: BlackBoxSystem + ?Sized>(
    x: &[f64],
    u_task: &[f64],
    field: &ScalarField,
    system: &S,
    beta: ClassKMap,
    controls: &Discretization,
    d0: &[f64],
) -> Result<FilterOutput> {
    let cert = NominalCertificate { field, system, controls: controls.clone(), d0: d0.to_vec() };
    let f = QcbfFilter::new(cert, beta, controls.clone(), system.control_box().clone())?;
    Ok(f.filter(x, u_task))
}

pub fn lrsf_filter<S: BlackBoxSystem + ?Sized>(
    x: &[f64],
    u_task: &[f64],
    field: &ScalarField,
    system: &S,
    controls: &Discretization,
    dstbs: &Discretization,
) -> Result<FilterOutput> {
    let game = Game::with_discretizations(system, controls.clone(), dstbs.clone())?;
    let f = LrsfFilter { certificate: GridCertificate::new(field, game), control_box: system.control_box().clone() };
    Ok(f.filter(x, u_task))
}

pub fn lrsf_filter_nominal<S: BlackBoxSystem + ?Sized>(
    x: &[f64],
    u_task: &[f64],
    field: &ScalarField,
    system: &S,
    controls: &Discretization,
    d0: &[f64],
) -> Result<FilterOutput> {
    let cert = NominalCertificate { field, system, controls: controls.clone(), d0: d0.to_vec() };
    let f = LrsfFilter { certificate: cert, control_box: system.control_box().clone() };
    Ok(f.filter(x, u_task))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BarrierKind {
    /// `1 - 16 theta^2 - 8 theta omega - 4 omega^2`.
    Heuristic,
    /// `cos(theta) - 1/2 - c omega^2`, built around braking with full torque.
    Analytic,
}

/// Closed-form barrier on the pendulum state used by the continuous-time
/// baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousBarrier {
    pub kind: BarrierKind,
    pub alpha: Alpha,
    omega_coeff: f64,
}

/// `sqrt(3) / (2 (19 - 10 sqrt(3)))`.
pub fn analytic_omega_coeff() -> f64 {
    let s3 = libm::sqrt(3.0);
    s3 / (2.0 * (19.0 - 10.0 * s3))
}

impl ContinuousBarrier {
    pub fn new(kind: BarrierKind, alpha: Alpha) -> Self {
        Self { kind, alpha, omega_coeff: analytic_omega_coeff() }
    }

    pub fn heuristic() -> Self {
        Self::new(BarrierKind::Heuristic, Alpha::default())
    }

    pub fn analytic() -> Self {
        Self::new(BarrierKind::Analytic, Alpha::default())
    }

    pub fn evaluate(&self, theta: f64, omega: f64) -> f64 {
        match self.kind {
            BarrierKind::Heuristic => 1.0 - 16.0 * theta * theta - 8.0 * theta * omega - 4.0 * omega * omega,
            BarrierKind::Analytic => libm::cos(theta) - 0.5 - self.omega_coeff * omega * omega,
        }
    }

    /// `(dh/dtheta, dh/domega)`.
    pub fn gradient(&self, theta: f64, omega: f64) -> (f64, f64) {
        match self.kind {
            BarrierKind::Heuristic => (-32.0 * theta - 8.0 * omega, -8.0 * theta - 8.0 * omega),
            BarrierKind::Analytic => (-libm::sin(theta), -2.0 * self.omega_coeff * omega),
        }
    }

    /// Worst-case time derivative `min_F h_dot(x, u, F)` on the pendulum.
    pub fn worst_hdot(&self, pendulum: &Pendulum, theta: f64, omega: f64, u: f64) -> f64 {
        let (a, b) = self.hdot_affine(pendulum, theta, omega);
        a + b * u
    }

    /// `min_F h_dot = a + b u`.
    fn hdot_affine(&self, pendulum: &Pendulum, theta: f64, omega: f64) -> (f64, f64) {
        let (h_th, h_om) = self.gradient(theta, omega);
        let (drift, gu, gd) = pendulum.affine_terms(theta);
        let f_max = pendulum.config().dstb_bound;
        (h_th * omega + h_om * drift - (h_om * gd).abs() * f_max, h_om * gu)
    }
}

impl ValueFunction for ContinuousBarrier {
    fn value(&self, x: &[f64]) -> f64 {
        self.evaluate(x[0], x[1])
    }
}

/// Continuous-time robust CBF filter:
/// `min_F h_dot(x, u, F) >= -alpha(h(x))`, solved exactly in the scalar control.
pub fn ct_cbf_filter(x: &[f64], u_task: &[f64], barrier: &ContinuousBarrier, pendulum: &Pendulum) -> FilterOutput {
    let (theta, omega) = (x[0], x[1]);
    let h = barrier.evaluate(theta, omega);
    let (a, b) = barrier.hdot_affine(pendulum, theta, omega);
    let need = -barrier.alpha.apply(h) - a;
    let u_max = pendulum.config().control_bound;
    let (mut lo, mut hi) = (-u_max, u_max);
    let mut empty = false;
    if b > 0.0 {
        lo = lo.max(need / b);
    } else if b < 0.0 {
        hi = hi.min(need / b);
    } else if need > 0.0 {
        empty = true;
    }
    empty |= lo > hi;
    let ut = u_task[0];
    let (u, feasible) = if empty {
        let u = if b > 0.0 {
            u_max
        } else if b < 0.0 {
            -u_max
        } else {
            ut.clamp(-u_max, u_max)
        };
        (u, false)
    } else {
        (ut.clamp(lo, hi), true)
    };
    FilterOutput {
        u_exec: vec![u],
        intervened: u != ut,
        constraint_margin: a + b * u + barrier.alpha.apply(h),
        feasible,
        fallback_used: !feasible,
        outside_certificate: h < 0.0,
    }
}

pub struct CtCbfFilter<'a> {
    pub barrier: ContinuousBarrier,
    pub pendulum: &'a Pendulum,
}

impl SafetyFilter for CtCbfFilter<'_> {
    fn filter(&self, x: &[f64], u_task: &[f64]) -> FilterOutput {
        ct_cbf_filter(x, u_task, &self.barrier, self.pendulum)
    }
}

/// Passes the (box-clamped) task input through.
pub struct NoFilter {
    pub control_box: Bounds,
}

impl SafetyFilter for NoFilter {
    fn filter(&self, _x: &[f64], u_task: &[f64]) -> FilterOutput {
        let mut u = u_task.to_vec();
        self.control_box.clamp(&mut u);
        FilterOutput {
            intervened: u.as_slice() != u_task,
            u_exec: u,
            constraint_margin: 0.0,
            feasible: true,
            fallback_used: false,
            outside_certificate: false,
        }
    }
}

pub trait TaskController {
    fn control(&self, x: &[f64]) -> Vec<f64>;
}

impl<T: TaskController + ?Sized> TaskController for &T {
    fn control(&self, x: &[f64]) -> Vec<f64> {
        (**self).control(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: 32.0, kd: 8.0 }
    }
}

/// `u = clamp(-kp theta - kd omega)`.
#[derive(Debug, Clone)]
pub struct PdController {
    pub gains: PdGains,
    pub control_box: Bounds,
}

impl PdController {
    pub fn new(gains: PdGains, control_box: Bounds) -> Self {
        Self { gains, control_box }
    }
}

impl TaskController for PdController {
    fn control(&self, x: &[f64]) -> Vec<f64> {
        let mut u = vec![-self.gains.kp * x[0] - self.gains.kd * x[1]];
        self.control_box.clamp(&mut u);
        u
    }
}

/// Always outputs the center of the control box.
pub struct ZeroController {
    pub dim: usize,
}

impl TaskController for ZeroController {
    fn control(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}
