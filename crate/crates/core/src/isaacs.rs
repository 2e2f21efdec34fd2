//! Grid dynamic programming for the discrete-time Isaacs equation
//!
//! ```text
//! V(x) = min{ g(x), max_u min_d V(f(x, u, d)) }
//! ```
//!
//! and the objects derived from a value field: the Q-lift
//! `Q(x, u, d) = min{ g(x), V(f(x, u, d)) }`, the fallback policy
//! `argmax_u min_d Q(x, u, d)` and worst-case disturbances. The disturbance
//! picks its input after seeing the control.
//!
//! The solver runs Jacobi sweeps: each sweep reads only the previous field, so
//! node order (and thread count) cannot change the result. Two exact
//! accelerations keep sweeps cheap on large grids:
//!
//! * max-min pruning: a control whose running minimum is already no better
//!   than the best control found so far is abandoned, and the node stops once
//!   some control reaches `g(x)`. The search starts from the previous sweep's
//!   maximizing control and minimizing disturbance.
//! * change tracking: every node remembers the box of grid nodes its last
//!   backup read. If none of them changed in the previous sweep, the backup
//!   would reproduce the same bits and is skipped.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dynamics::BlackBoxSystem;
use crate::error::{config_err, contract, Error, Result};
use crate::grid::{Discretization, Grid, ScalarField, MAX_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    Undiscounted,
    Discounted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub mode: SolveMode,
    /// Discount factor, used only in discounted mode.
    pub gamma_env: f64,
    /// Max-norm change per sweep at which iteration stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub control_points: usize,
    pub dstb_points: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            mode: SolveMode::Undiscounted,
            gamma_env: 0.9,
            tolerance: 1e-6,
            max_iterations: 2000,
            control_points: 41,
            dstb_points: 21,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(config_err!("solve.tolerance must be positive, got {}", self.tolerance));
        }
        if self.max_iterations == 0 {
            return Err(config_err!("solve.max_iterations must be at least 1"));
        }
        if self.mode == SolveMode::Discounted && !(self.gamma_env > 0.0 && self.gamma_env < 1.0) {
            return Err(config_err!("solve.gamma_env must lie in (0, 1), got {}", self.gamma_env));
        }
        if self.control_points == 0 || self.dstb_points == 0 {
            return Err(config_err!("solve discretizations need at least one point"));
        }
        if self.control_points > u16::MAX as usize || self.dstb_points > u16::MAX as usize {
            return Err(config_err!("solve discretizations are limited to 65535 points"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub final_residual: f64,
    /// Max-norm change of every sweep.
    pub residual_history: Vec<f64>,
    /// Nodes whose backup was actually recomputed in every sweep.
    pub recomputed_history: Vec<usize>,
    /// Successor queries that fell outside the grid hull, summed over sweeps.
    pub clamp_events: u64,
    /// Nodes with `V >= 0` that have some successor outside the hull.
    pub clamped_safe_nodes: usize,
    /// False when a safe node depends on clamped interpolation.
    pub valid: bool,
    /// Filled in by callers that have a clock.
    pub wall_time_s: Option<f64>,
}

/// Maps a closure over node indices. Implementations may run in parallel but
/// must return results in index order.
pub trait SweepExecutor {
    fn map_range<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Single-threaded executor.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl SweepExecutor for Sequential {
    fn map_range<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// A system together with the discretized control and disturbance boxes.
pub struct Game<'a, S: BlackBoxSystem + ?Sized> {
    pub system: &'a S,
    pub controls: Discretization,
    pub dstbs: Discretization,
}

impl<'a, S: BlackBoxSystem + ?Sized> Game<'a, S> {
    pub fn new(system: &'a S, control_points: usize, dstb_points: usize) -> Result<Self> {
        let controls = system.control_box().discretize(control_points)?;
        let dstbs = system.dstb_box().discretize(dstb_points)?;
        Self::with_discretizations(system, controls, dstbs)
    }

    pub fn from_config(system: &'a S, config: &SolveConfig) -> Result<Self> {
        config.validate()?;
        Self::new(system, config.control_points, config.dstb_points)
    }

    pub fn with_discretizations(system: &'a S, controls: Discretization, dstbs: Discretization) -> Result<Self> {
        if controls.is_empty() || dstbs.is_empty() {
            return Err(config_err!("control and disturbance discretizations must be non-empty"));
        }
        if controls.dim() != system.control_box().dim() || dstbs.dim() != system.dstb_box().dim() {
            return Err(contract!("discretization dimensions do not match the system boxes"));
        }
        if !controls.iter().all(|u| system.control_box().contains(u))
            || !dstbs.iter().all(|d| system.dstb_box().contains(d))
        {
            return Err(contract!("discretization points must lie in the system boxes"));
        }
        Ok(Self { system, controls, dstbs })
    }

    fn check_state(&self, field: &ScalarField, x: &[f64]) -> Result<()> {
        if x.len() != self.system.state_dim() || field.grid().dim() != x.len() {
            return Err(contract!(
                "state of dimension {} does not match system ({}) and field ({})",
                x.len(),
                self.system.state_dim(),
                field.grid().dim()
            ));
        }
        Ok(())
    }

    /// `max_u min_d V(f(x, u, d))` over the discretizations, full enumeration.
    pub fn inner_game_value(&self, field: &ScalarField, x: &[f64]) -> f64 {
        let mut next = [0.0; MAX_DIM];
        let next = &mut next[..x.len()];
        let mut best = f64::NEG_INFINITY;
        for u in self.controls.iter() {
            let mut worst = f64::INFINITY;
            for d in self.dstbs.iter() {
                self.system.transition(x, u, d, next);
                worst = worst.min(field.eval(next).0);
            }
            best = best.max(worst);
        }
        best
    }

    /// One Isaacs backup at `x`.
    pub fn backup(&self, field: &ScalarField, x: &[f64], mode: SolveMode, gamma_env: f64) -> Result<f64> {
        self.check_state(field, x)?;
        let g = self.system.margin(x);
        let inner = g.min(self.inner_game_value(field, x));
        Ok(match mode {
            SolveMode::Undiscounted => inner,
            SolveMode::Discounted => (1.0 - gamma_env) * g + gamma_env * inner,
        })
    }

    /// `Q(x, u, d) = min{ g(x), V(f(x, u, d)) }`.
    pub fn q_value(&self, field: &ScalarField, x: &[f64], u: &[f64], d: &[f64]) -> Result<f64> {
        self.check_state(field, x)?;
        let mut next = vec![0.0; x.len()];
        self.system.step(x, u, d, &mut next)?;
        Ok(self.system.margin(x).min(field.eval(&next).0))
    }

    /// `min_d Q(x, u, d)` and the first minimizing disturbance.
    pub fn robust_q(&self, field: &ScalarField, x: &[f64], u: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_state(field, x)?;
        if !self.system.control_box().contains(u) {
            return Err(contract!("control {u:?} outside the control box"));
        }
        let (v, i) = self.robust_q_index(field, x, u);
        Ok((v, self.dstbs.get(i).to_vec()))
    }

    /// Unchecked `min_d Q(x, u, d)` with the minimizing disturbance index.
    pub(crate) fn robust_q_index(&self, field: &ScalarField, x: &[f64], u: &[f64]) -> (f64, usize) {
        let g = self.system.margin(x);
        let mut next = [0.0; MAX_DIM];
        let next = &mut next[..x.len()];
        let mut best = (f64::INFINITY, 0);
        for (i, d) in self.dstbs.iter().enumerate() {
            self.system.transition(x, u, d, next);
            let q = g.min(field.eval(next).0);
            if q < best.0 {
                best = (q, i);
            }
        }
        best
    }

    /// `min_d V(f(x, u, d))` and the first minimizing disturbance index.
    pub fn worst_next_value(&self, field: &ScalarField, x: &[f64], u: &[f64]) -> (f64, usize) {
        let mut next = [0.0; MAX_DIM];
        let next = &mut next[..x.len()];
        let mut best = (f64::INFINITY, 0);
        for (i, d) in self.dstbs.iter().enumerate() {
            self.system.transition(x, u, d, next);
            let v = field.eval(next).0;
            if v < best.0 {
                best = (v, i);
            }
        }
        best
    }

    /// Fallback control `argmax_u min_d Q(x, u, d)` and its value. Ties go to
    /// the control closest to zero, then to the first in enumeration order.
    pub fn fallback_action(&self, field: &ScalarField, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_state(field, x)?;
        let (i, v) = self.fallback_index(field, x);
        Ok((self.controls.get(i).to_vec(), v))
    }

    pub(crate) fn fallback_index(&self, field: &ScalarField, x: &[f64]) -> (usize, f64) {
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, u) in self.controls.iter().enumerate() {
            let (v, _) = self.robust_q_index(field, x, u);
            let norm: f64 = u.iter().map(|c| c * c).sum();
            let better = match best {
                None => true,
                Some((_, bv, bn)) => v > bv || (v == bv && norm < bn),
            };
            if better {
                best = Some((i, v, norm));
            }
        }
        let (i, v, _) = best.expect("controls are non-empty");
        (i, v)
    }

    /// Pruned backup used by the solver. Returns the same value as
    /// [`backup`](Self::backup) for the same field.
    fn node_backup(&self, field: &ScalarField, x: &[f64], hint: (u16, u16), mode: SolveMode, gamma: f64) -> NodeUpdate {
        let dim = x.len();
        let g = self.system.margin(x);
        let nu = self.controls.len();
        let nd = self.dstbs.len();
        let mut next = [0.0; MAX_DIM];
        let next = &mut next[..dim];
        let mut lo = [u16::MAX; MAX_DIM];
        let mut hi = [0u16; MAX_DIM];
        let mut clamps = 0u32;
        let mut best = f64::NEG_INFINITY;
        let mut best_u = hint.0 as usize;
        let mut best_d = hint.1 as usize;
        let hint_d = hint.1 as usize;
        for k in 0..nu {
            let ui = (hint.0 as usize + k) % nu;
            let u = self.controls.get(ui);
            let mut worst = f64::INFINITY;
            let mut worst_d = hint_d;
            for j in 0..nd {
                let di = (hint_d + j) % nd;
                self.system.transition(x, u, self.dstbs.get(di), next);
                let s = field.eval_stencil(next);
                for a in 0..dim {
                    lo[a] = lo[a].min(s.corner[a]);
                    hi[a] = hi[a].max(s.corner[a] + 1);
                }
                clamps += s.clamped as u32;
                if s.value < worst {
                    worst = s.value;
                    worst_d = di;
                }
                if worst <= best {
                    break;
                }
            }
            if worst > best {
                best = worst;
                best_u = ui;
                best_d = worst_d;
            }
            if best >= g {
                break;
            }
        }
        let inner = g.min(best);
        let value = match mode {
            SolveMode::Undiscounted => inner,
            SolveMode::Discounted => (1.0 - gamma) * g + gamma * inner,
        };
        NodeUpdate { value, hint: (best_u as u16, best_d as u16), lo, hi, clamps }
    }
}

struct NodeUpdate {
    value: f64,
    hint: (u16, u16),
    lo: [u16; MAX_DIM],
    hi: [u16; MAX_DIM],
    clamps: u32,
}

/// Inclusive n-D prefix counts of changed nodes for O(2^n) box queries.
struct ChangeIndex {
    dims: Vec<usize>,
    strides: Vec<usize>,
    sums: Vec<u32>,
}

impl ChangeIndex {
    fn new(grid: &Grid) -> Self {
        let dims: Vec<usize> = grid.axes().iter().map(|a| a.count + 1).collect();
        let mut strides = vec![1usize; dims.len()];
        for k in (0..dims.len() - 1).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }
        let total = dims.iter().product();
        Self { dims, strides, sums: vec![0; total] }
    }

    fn rebuild(&mut self, grid: &Grid, changed: &[bool]) {
        self.sums.iter_mut().for_each(|s| *s = 0);
        let n = self.dims.len();
        let mut idx = [0usize; MAX_DIM];
        for (flat, c) in changed.iter().enumerate() {
            if *c {
                grid.node_index(flat, &mut idx[..n]);
                let off: usize = (0..n).map(|k| (idx[k] + 1) * self.strides[k]).sum();
                self.sums[off] = 1;
            }
        }
        for k in 0..n {
            let s = self.strides[k];
            for i in 0..self.sums.len() {
                if !(i / s).is_multiple_of(self.dims[k]) {
                    self.sums[i] += self.sums[i - s];
                }
            }
        }
    }

    /// Whether any node in the inclusive box `[lo, hi]` changed.
    fn any_in(&self, lo: &[u16], hi: &[u16]) -> bool {
        let n = self.dims.len();
        let mut total: i64 = 0;
        for c in 0..(1usize << n) {
            let mut off = 0;
            let mut sign = 1i64;
            for k in 0..n {
                let i = if c >> k & 1 == 1 {
                    sign = -sign;
                    lo[k] as usize
                } else {
                    hi[k] as usize + 1
                };
                off += i * self.strides[k];
            }
            total += sign * self.sums[off] as i64;
        }
        total > 0
    }
}

/// Solves the Isaacs equation on `grid` by Jacobi value iteration from `V0 = g`.
pub fn solve<S: BlackBoxSystem + ?Sized>(
    system: &S,
    grid: &Grid,
    config: &SolveConfig,
) -> Result<(ScalarField, SolveDiagnostics)> {
    solve_with(system, grid, config, &Sequential)
}

pub fn solve_with<S, E>(
    system: &S,
    grid: &Grid,
    config: &SolveConfig,
    exec: &E,
) -> Result<(ScalarField, SolveDiagnostics)>
where
    S: BlackBoxSystem + ?Sized,
    E: SweepExecutor,
{
    if grid.dim() != system.state_dim() {
        return Err(contract!("grid dimension {} != state dimension {}", grid.dim(), system.state_dim()));
    }
    let game = Game::from_config(system, config)?;
    let n = grid.node_count();
    let dim = grid.dim();
    let init = exec.map_range(n, |i| {
        let mut x = [0.0; MAX_DIM];
        grid.node_coords(i, &mut x[..dim]);
        system.margin(&x[..dim])
    });
    let mut field = ScalarField::new(grid.clone(), init, Default::default())?;
    let mut hints = vec![(0u16, 0u16); n];
    let mut boxes = vec![([0u16; MAX_DIM], [0u16; MAX_DIM]); n];
    let mut changes = ChangeIndex::new(grid);
    let mut diag = SolveDiagnostics { valid: true, ..Default::default() };
    let mut converged = false;

    for sweep in 0..config.max_iterations {
        let updates = {
            let (field, hints, boxes, changes, game) = (&field, &hints, &boxes, &changes, &game);
            exec.map_range(n, move |i| {
                if sweep > 0 && !changes.any_in(&boxes[i].0[..dim], &boxes[i].1[..dim]) {
                    return None;
                }
                let mut x = [0.0; MAX_DIM];
                grid.node_coords(i, &mut x[..dim]);
                Some(game.node_backup(field, &x[..dim], hints[i], config.mode, config.gamma_env))
            })
        };
        let mut values = field.values().to_vec();
        let mut changed = vec![false; n];
        let mut residual = 0.0f64;
        let mut recomputed = 0;
        for (i, upd) in updates.into_iter().enumerate() {
            let Some(upd) = upd else { continue };
            recomputed += 1;
            diag.clamp_events += upd.clamps as u64;
            hints[i] = upd.hint;
            boxes[i] = (upd.lo, upd.hi);
            if upd.value.to_bits() != values[i].to_bits() {
                changed[i] = true;
                residual = residual.max((upd.value - values[i]).abs());
                values[i] = upd.value;
            }
        }
        field = ScalarField::new(grid.clone(), values, Default::default())?;
        changes.rebuild(grid, &changed);
        diag.iterations = sweep + 1;
        diag.final_residual = residual;
        diag.residual_history.push(residual);
        diag.recomputed_history.push(recomputed);
        if residual <= config.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        diag.valid = false;
        return Err(Error::NonConvergence(Box::new(diag)));
    }

    let hull = grid.hull();
    let clamped = {
        let (field, game, hull) = (&field, &game, &hull);
        exec.map_range(n, move |i| {
            if field.values()[i] < 0.0 {
                return false;
            }
            let mut x = [0.0; MAX_DIM];
            let mut next = [0.0; MAX_DIM];
            grid.node_coords(i, &mut x[..dim]);
            game.controls.iter().any(|u| {
                game.dstbs.iter().any(|d| {
                    system.transition(&x[..dim], u, d, &mut next[..dim]);
                    !hull.contains(&next[..dim])
                })
            })
        })
    };
    diag.clamped_safe_nodes = clamped.iter().filter(|c| **c).count();
    diag.valid = diag.clamped_safe_nodes == 0;
    field.meta.label = "isaacs-value".into();
    let p = &mut field.meta.params;
    p.insert("mode".into(), alloc::format!("{:?}", config.mode).to_lowercase());
    p.insert("gamma_env".into(), alloc::format!("{}", config.gamma_env));
    p.insert("tolerance".into(), alloc::format!("{:e}", config.tolerance));
    p.insert("control_points".into(), alloc::format!("{}", config.control_points));
    p.insert("dstb_points".into(), alloc::format!("{}", config.dstb_points));
    p.insert("iterations".into(), alloc::format!("{}", diag.iterations));
    Ok((field, diag))
}

/// Isaacs backup at `x` for the discretizations in `config`.
pub fn bellman_backup<S: BlackBoxSystem + ?Sized>(
    field: &ScalarField,
    system: &S,
    x: &[f64],
    config: &SolveConfig,
) -> Result<f64> {
    Game::from_config(system, config)?.backup(field, x, config.mode, config.gamma_env)
}

pub fn q_value<S: BlackBoxSystem + ?Sized>(
    field: &ScalarField,
    system: &S,
    x: &[f64],
    u: &[f64],
    d: &[f64],
) -> Result<f64> {
    if x.len() != field.grid().dim() {
        return Err(contract!("state dimension mismatch"));
    }
    let mut next = vec![0.0; x.len()];
    system.step(x, u, d, &mut next)?;
    Ok(system.margin(x).min(field.eval(&next).0))
}

/// `min_{d in dstbs} Q(x, u, d)` and the first minimizer in enumeration order.
pub fn robust_q<S: BlackBoxSystem + ?Sized>(
    field: &ScalarField,
    system: &S,
    x: &[f64],
    u: &[f64],
    dstbs: &Discretization,
) -> Result<(f64, Vec<f64>)> {
    if dstbs.is_empty() {
        return Err(config_err!("empty disturbance discretization"));
    }
    let mut best: Option<(f64, &[f64])> = None;
    for d in dstbs.iter() {
        let q = q_value(field, system, x, u, d)?;
        if best.is_none_or(|(b, _)| q < b) {
            best = Some((q, d));
        }
    }
    let (q, d) = best.expect("non-empty");
    Ok((q, d.to_vec()))
}

pub fn fallback_action<S: BlackBoxSystem + ?Sized>(
    field: &ScalarField,
    system: &S,
    x: &[f64],
    controls: &Discretization,
    dstbs: &Discretization,
) -> Result<(Vec<f64>, f64)> {
    let game = Game::with_discretizations(system, controls.clone(), dstbs.clone())?;
    game.fallback_action(field, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub max: f64,
    pub mean_abs: f64,
    pub count: usize,
}

/// `|V(x) - backup(V)(x)|` aggregated over `states`.
pub fn bellman_residual<S: BlackBoxSystem + ?Sized>(
    field: &ScalarField,
    system: &S,
    states: &[Vec<f64>],
    config: &SolveConfig,
) -> Result<ResidualStats> {
    let game = Game::from_config(system, config)?;
    let mut max = 0.0f64;
    let mut sum = 0.0;
    for x in states {
        let r = (field.interpolate(x)? - game.backup(field, x, config.mode, config.gamma_env)?).abs();
        max = max.max(r);
        sum += r;
    }
    let count = states.len();
    Ok(ResidualStats { max, mean_abs: if count > 0 { sum / count as f64 } else { 0.0 }, count })
}
