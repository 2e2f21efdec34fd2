//! Closed-loop rollouts, boundary sampling and safe-set metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::BlackBoxSystem;
use crate::error::{config_err, Result};
use crate::filters::{SafetyFilter, TaskController};
use crate::grid::{Bounds, Discretization, Grid, ScalarField, ValueFunction, MAX_DIM};

/// Proposals drawn before an empty boundary band is reported.
pub const MAX_PROPOSALS: usize = 1_000_000;

/// Bins of the squared-deviation histogram.
pub const DEVIATION_BINS: usize = 64;

/// One closed-loop run. Row `t` holds the visited state `x_t`, its margin and
/// the inputs computed there; the inputs of the final row are not applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub u_task: Vec<Vec<f64>>,
    pub u_exec: Vec<Vec<f64>>,
    pub d_applied: Vec<Vec<f64>>,
    pub margins: Vec<f64>,
    pub safe: bool,
    pub min_margin: f64,
    pub interventions: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of transitions actually simulated.
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

/// A disturbance that may react to the executed control.
pub trait DisturbancePolicy {
    fn disturbance(&mut self, x: &[f64], u: &[f64]) -> Vec<f64>;
}

impl<P: DisturbancePolicy + ?Sized> DisturbancePolicy for &mut P {
    fn disturbance(&mut self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (**self).disturbance(x, u)
    }
}

/// The center of the disturbance box.
pub struct ZeroDisturbance {
    pub center: Vec<f64>,
}

impl ZeroDisturbance {
    pub fn new(dstb_box: &Bounds) -> Self {
        Self { center: dstb_box.center() }
    }
}

impl DisturbancePolicy for ZeroDisturbance {
    fn disturbance(&mut self, _x: &[f64], _u: &[f64]) -> Vec<f64> {
        self.center.clone()
    }
}

/// Independent uniform draws from the disturbance box.
pub struct RandomDisturbance {
    pub dstb_box: Bounds,
    rng: ChaCha8Rng,
}

impl RandomDisturbance {
    pub fn new(dstb_box: Bounds, seed: u64) -> Self {
        Self { dstb_box, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl DisturbancePolicy for RandomDisturbance {
    fn disturbance(&mut self, _x: &[f64], _u: &[f64]) -> Vec<f64> {
        let b = &self.dstb_box;
        b.lower()
            .iter()
            .zip(b.upper())
            .map(|(l, h)| if l == h { *l } else { self.rng.random_range(*l..=*h) })
            .collect()
    }
}

/// Worst disturbance against a frozen executed control:
/// `argmin_d V(f(x, u_exec, d))`, ties to the first point in enumeration order.
pub struct BestResponseGrid<'a, S: BlackBoxSystem + ?Sized> {
    pub field: &'a ScalarField,
    pub system: &'a S,
    pub dstbs: Discretization,
}

impl<S: BlackBoxSystem + ?Sized> BestResponseGrid<'_, S> {
    pub fn best(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, f64) {
        let mut next = [0.0; MAX_DIM];
        let next = &mut next[..x.len()];
        let mut best = (f64::INFINITY, 0);
        for (i, d) in self.dstbs.iter().enumerate() {
            self.system.transition(x, u, d, next);
            let v = self.field.eval(next).0;
            if v < best.0 {
                best = (v, i);
            }
        }
        (self.dstbs.get(best.1).to_vec(), best.0)
    }

    /// State-indexed form: freezes `u_exec = filter(x, task(x))` first.
    pub fn at_state(&self, x: &[f64], filter: &impl SafetyFilter, task: &impl TaskController) -> Vec<f64> {
        let u = filter.filter(x, &task.control(x)).u_exec;
        self.best(x, &u).0
    }
}

impl<S: BlackBoxSystem + ?Sized> DisturbancePolicy for BestResponseGrid<'_, S> {
    fn disturbance(&mut self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.best(x, u).0
    }
}

pub fn frozen_best_response<'a, S: BlackBoxSystem + ?Sized>(
    field: &'a ScalarField,
    system: &'a S,
    dstbs: Discretization,
) -> BestResponseGrid<'a, S> {
    BestResponseGrid { field, system, dstbs }
}

/// Runs the closed loop from `x0` until failure or `horizon` transitions.
pub fn rollout<S, F, T, P>(system: &S, filter: &F, task: &T, dstb: &mut P, x0: &[f64], horizon: usize) -> Trajectory
where
    S: BlackBoxSystem + ?Sized,
    F: SafetyFilter + ?Sized,
    T: TaskController + ?Sized,
    P: DisturbancePolicy + ?Sized,
{
    let mut tr = Trajectory {
        states: Vec::new(),
        u_task: Vec::new(),
        u_exec: Vec::new(),
        d_applied: Vec::new(),
        margins: Vec::new(),
        safe: true,
        min_margin: f64::INFINITY,
        interventions: 0,
    };
    let mut x = x0.to_vec();
    let mut next = vec![0.0; x.len()];
    for t in 0..=horizon {
        let g = system.margin(&x);
        let u_task = task.control(&x);
        let out = filter.filter(&x, &u_task);
        let mut u = out.u_exec;
        system.control_box().clamp(&mut u);
        let mut d = dstb.disturbance(&x, &u);
        system.dstb_box().clamp(&mut d);
        tr.interventions += out.intervened as usize;
        tr.states.push(x.clone());
        tr.u_task.push(u_task);
        tr.margins.push(g);
        tr.min_margin = tr.min_margin.min(g);
        if g < 0.0 {
            tr.safe = false;
        }
        let stop = g < 0.0 || t == horizon;
        if !stop {
            system.transition(&x, &u, &d, &mut next);
            x.copy_from_slice(&next);
        }
        tr.u_exec.push(u);
        tr.d_applied.push(d);
        if stop {
            break;
        }
    }
    tr
}

/// Uniform rejection sampling of `n` in-hull states with `0 <= V(x) <= band`.
pub fn sample_boundary_states(field: &ScalarField, n: usize, band: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(band > 0.0) {
        return Err(config_err!("boundary band must be positive, got {band}"));
    }
    let hull = field.grid().hull();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut since_hit = 0usize;
    let mut x = vec![0.0; hull.dim()];
    while out.len() < n {
        for (k, v) in x.iter_mut().enumerate() {
            *v = rng.random_range(hull.lower()[k]..=hull.upper()[k]);
        }
        let v = field.eval(&x).0;
        if (0.0..=band).contains(&v) {
            out.push(x.clone());
            since_hit = 0;
        } else {
            since_hit += 1;
            if since_hit >= MAX_PROPOSALS {
                return Err(config_err!(
                    "boundary band [0, {band}] is empty: no accepted state in {MAX_PROPOSALS} proposals"
                ));
            }
        }
    }
    Ok(out)
}

/// Areas of 0-superlevel sets and pairwise containment on a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub names: Vec<String>,
    pub safe_nodes: Vec<usize>,
    pub areas: Vec<f64>,
    /// `containment[a][b]`: nodes in set `a` but not in set `b`.
    pub containment: Vec<Vec<usize>>,
    /// `area_ratio[a][b] = areas[a] / areas[b]`.
    pub area_ratio: Vec<Vec<f64>>,
}

/// Node values of each field on `grid`.
pub fn node_values(field: &dyn ValueFunction, grid: &Grid) -> Vec<f64> {
    let mut x = vec![0.0; grid.dim()];
    (0..grid.node_count())
        .map(|i| {
            grid.node_coords(i, &mut x);
            field.value(&x)
        })
        .collect()
}

/// Nodes with `a >= level_a` but not `b >= level_b`.
pub fn containment_violations(a: &[f64], level_a: f64, b: &[f64], level_b: f64) -> usize {
    a.iter().zip(b).filter(|(va, vb)| **va >= level_a && !(**vb >= level_b)).count()
}

pub fn compute_set_metrics(fields: &[(&str, &dyn ValueFunction)], grid: &Grid) -> SetMetrics {
    let values: Vec<Vec<f64>> = fields.iter().map(|(_, f)| node_values(*f, grid)).collect();
    set_metrics_from_values(fields.iter().map(|(n, _)| String::from(*n)).collect(), &values, grid)
}

pub fn set_metrics_from_values(names: Vec<String>, values: &[Vec<f64>], grid: &Grid) -> SetMetrics {
    let safe_nodes: Vec<usize> = values.iter().map(|v| v.iter().filter(|x| **x >= 0.0).count()).collect();
    let areas: Vec<f64> = values.iter().map(|v| grid.area_where(v, |x| x >= 0.0)).collect();
    let containment = values
        .iter()
        .map(|a| values.iter().map(|b| containment_violations(a, 0.0, b, 0.0)).collect())
        .collect();
    let area_ratio = areas.iter().map(|a| areas.iter().map(|b| a / b).collect()).collect();
    SetMetrics { names, safe_nodes, areas, containment, area_ratio }
}

/// Pooled statistics of per-step `||u_task - u_exec||^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub range_max: f64,
    /// Fixed-width bins over `[0, range_max]`; larger values land in the last bin.
    pub histogram: Vec<u64>,
}

pub fn deviation_stats(trajectories: &[Trajectory], u_max: f64) -> Result<DeviationStats> {
    if trajectories.is_empty() {
        return Err(config_err!("deviation statistics need at least one trajectory"));
    }
    let mut dev: Vec<f64> = trajectories
        .iter()
        .flat_map(|t| {
            t.u_task.iter().zip(&t.u_exec).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        })
        .collect();
    let range_max = 4.0 * u_max * u_max;
    let mut histogram = vec![0u64; DEVIATION_BINS];
    for d in &dev {
        let bin = ((d / range_max) * DEVIATION_BINS as f64) as usize;
        histogram[bin.min(DEVIATION_BINS - 1)] += 1;
    }
    let count = dev.len();
    let mean = if count == 0 { 0.0 } else { dev.iter().sum::<f64>() / count as f64 };
    let max = dev.iter().copied().fold(0.0, f64::max);
    dev.sort_by(f64::total_cmp);
    let median = match count {
        0 => 0.0,
        c if c % 2 == 1 => dev[c / 2],
        c => 0.5 * (dev[c / 2 - 1] + dev[c / 2]),
    };
    Ok(DeviationStats { count, mean, median, max, range_max, histogram })
}
