//! End-to-end acceptance checks on the canonical pendulum. Each test prints one
//! `criterion N: PASS|FAIL` line with the measured numbers, then asserts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use qcbf::checkpoint::read_checkpoint;
use qcbf::config::ExperimentConfig;
use qcbf::exec::RayonExecutor;
use qcbf_core::filters::{
    lrsf_filter, lrsf_filter_nominal, qcbf_filter, qcbf_filter_nominal, BarrierKind, ContinuousBarrier, CtCbfFilter,
    GridCertificate, PdController, QcbfFilter, SafetyFilter, TaskController,
};
use qcbf_core::harness::{rollout, sample_boundary_states, BestResponseGrid};
use qcbf_core::isaacs::{bellman_residual, solve_with, Game};
use qcbf_core::learn::{
    ctrl_objective_grad, dstb_objective_grad, local_optimality_probe, matches_grid_argmin, neural_value, sign_agreement,
    strided_nodes, LibraryRollouts, Mlp, MlpSpec, OutputMap,
};
use qcbf_core::{
    Axis, BlackBoxSystem, Bounds, ClassKMap, Discretization, Grid, Pendulum, PendulumConfig, ScalarField,
    SolveDiagnostics,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Canon {
    cfg: ExperimentConfig,
    system: Pendulum,
    field: ScalarField,
    diag: SolveDiagnostics,
    seconds: f64,
}

impl Canon {
    fn game(&self) -> Game<'_, Pendulum> {
        Game::from_config(&self.system, &self.cfg.solve).unwrap()
    }

    fn controls(&self) -> Discretization {
        self.system.control_box().discretize(self.cfg.solve.control_points).unwrap()
    }

    fn dstbs(&self) -> Discretization {
        self.system.dstb_box().discretize(self.cfg.solve.dstb_points).unwrap()
    }

    fn beta(&self) -> ClassKMap {
        self.cfg.filter.beta
    }

    /// `min_d V(f(x, u, d))`, computed here rather than through the filter code.
    fn worst_next(&self, x: &[f64], u: &[f64]) -> f64 {
        let mut next = [0.0; 2];
        self.dstbs()
            .iter()
            .map(|d| {
                self.system.step(x, u, d, &mut next).unwrap();
                self.field.interpolate(&next).unwrap()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn residuals(&self, n: usize, seed: u64) -> qcbf_core::isaacs::ResidualStats {
        let hull = self.field.grid().hull();
        let xs = uniform(hull.lower(), hull.upper(), n, seed);
        let chunks: Vec<_> = xs
            .par_chunks(250)
            .map(|c| bellman_residual(&self.field, &self.system, c, &self.cfg.solve).unwrap())
            .collect();
        let max = chunks.iter().map(|r| r.max).fold(0.0, f64::max);
        let sum: f64 = chunks.iter().map(|r| r.mean_abs * r.count as f64).sum();
        qcbf_core::isaacs::ResidualStats { max, mean_abs: sum / n as f64, count: n }
    }
}

/// The canonical solve, shared by every criterion. Tests block here first so
/// the timed solve does not compete with other work.
fn canon() -> &'static Canon {
    static C: OnceLock<Canon> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = ExperimentConfig::load(&root().join("configs/pendulum.json")).unwrap();
        let system = Pendulum::new(cfg.system).unwrap();
        let t = Instant::now();
        let (field, diag) = solve_with(&system, &cfg.grid, &cfg.solve, &RayonExecutor).unwrap();
        Canon { seconds: t.elapsed().as_secs_f64(), cfg, system, field, diag }
    })
}

fn uniform(lo: &[f64], hi: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| lo.iter().zip(hi).map(|(l, h)| rng.random_range(*l..*h)).collect()).collect()
}

fn safe_states(c: &Canon, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let hull = c.field.grid().hull();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: Vec<f64> = (0..2).map(|k| rng.random_range(hull.lower()[k]..hull.upper()[k])).collect();
        if c.field.eval(&x).0 >= 0.0 {
            out.push(x);
        }
    }
    out
}

/// Written to the stdout handle directly so the line shows without `--nocapture`.
fn report(n: u32, pass: bool, detail: String) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" }).unwrap();
}

#[test]
fn criterion_1_ground_truth_solve() {
    let c = canon();
    let grid = c.field.grid();
    let area = grid.area_where(c.field.values(), |v| v >= 0.0);
    let fine_grid = Grid::new(
        grid.axes().iter().map(|a| Axis { min: a.min, max: a.max, count: 2 * a.count - 1 }).collect(),
    )
    .unwrap();
    let fine_cfg = qcbf_core::SolveConfig { max_iterations: 4000, ..c.cfg.solve };
    let (fine, fdiag) = solve_with(&c.system, &fine_grid, &fine_cfg, &RayonExecutor).unwrap();
    let fine_area = fine_grid.area_where(fine.values(), |v| v >= 0.0);
    let change = (fine_area - area).abs() / fine_area;
    // The safe set must not reach the omega edges of the grid.
    let om = &grid.axes()[1];
    let edge_safe = (0..grid.node_count())
        .filter(|i| {
            let x = grid.node(*i);
            c.field.values()[*i] >= 0.0 && ((x[1] - om.min).abs() < 1e-12 || (x[1] - om.max).abs() < 1e-12)
        })
        .count();
    let pass = c.diag.final_residual <= 1e-6
        && c.diag.iterations <= 2000
        && c.seconds < 60.0
        && change < 0.01
        && c.diag.valid
        && edge_safe == 0
        && fdiag.valid;
    report(
        1,
        pass,
        format!(
            "sweeps {} residual {:.3e} time {:.1}s area {area:.4}; {}x{} area {fine_area:.4} change {:.3}%; \
             clamped safe nodes {}; safe nodes on omega edges {edge_safe}",
            c.diag.iterations,
            c.diag.final_residual,
            c.seconds,
            fine_grid.axes()[0].count,
            fine_grid.axes()[1].count,
            100.0 * change,
            c.diag.clamped_safe_nodes,
        ),
    );
    assert!(pass);
}

struct FilterRun {
    name: &'static str,
    safe: usize,
    n: usize,
}

fn boundary_runs(c: &Canon, band: f64) -> Vec<FilterRun> {
    let grid = c.field.grid();
    let task = PdController::new(c.cfg.filter.gains, c.system.control_box().clone());
    let dstbs = c.dstbs();
    let rc = &c.cfg.rollout;
    let run = |name: &'static str, filter: &(dyn SafetyFilter + Sync), cert: &ScalarField| {
        let starts = sample_boundary_states(cert, rc.n, band, c.cfg.seed).unwrap();
        let safe = starts
            .par_iter()
            .filter(|x0| {
                let mut br = BestResponseGrid { field: cert, system: &c.system, dstbs: dstbs.clone() };
                rollout(&c.system, filter, &task, &mut br, x0, rc.horizon as usize).safe
            })
            .count();
        FilterRun { name, safe, n: rc.n }
    };
    let q = QcbfFilter::new(
        GridCertificate::new(&c.field, c.game()),
        c.beta(),
        c.controls(),
        c.system.control_box().clone(),
    )
    .unwrap();
    let mut out = vec![run("qcbf", &q, &c.field)];
    for (name, kind) in [("ct-ana", BarrierKind::Analytic), ("ct-heu", BarrierKind::Heuristic)] {
        let barrier = ContinuousBarrier::new(kind, c.cfg.filter.alpha);
        let field = ScalarField::from_fn(grid.clone(), name, |x| barrier.evaluate(x[0], x[1])).unwrap();
        out.push(run(name, &CtCbfFilter { barrier, pendulum: &c.system }, &field));
    }
    out
}

#[test]
fn criterion_2_empirical_safety() {
    let c = canon();
    let t = Instant::now();
    let third = core::f64::consts::FRAC_PI_3;
    let wide = boundary_runs(c, 0.02 * third);
    let narrow = boundary_runs(c, 0.01 * third);
    let secs = t.elapsed().as_secs_f64();
    let mut pass = secs < 120.0;
    let mut parts = Vec::new();
    for (w, n) in wide.iter().zip(&narrow) {
        let ok = w.safe == w.n || n.safe == n.n;
        pass &= ok;
        parts.push(format!("{} {}/{} (band 0.02) {}/{} (band 0.01)", w.name, w.safe, w.n, n.safe, n.n));
    }
    report(2, pass, format!("{}; {secs:.1}s", parts.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_3_conservativeness() {
    let c = canon();
    let grid = c.field.grid();
    let eps = c.residuals(c.cfg.sets.residual_samples, 3).max;
    let h = ContinuousBarrier::analytic();
    let h_vals: Vec<f64> = (0..grid.node_count()).map(|i| grid.node(i)).map(|x| h.evaluate(x[0], x[1])).collect();
    let violations = h_vals.iter().zip(c.field.values()).filter(|(h, v)| **h >= 0.0 && **v < -eps).count();
    let ratio = grid.area_where(c.field.values(), |v| v >= 0.0) / grid.area_where(&h_vals, |v| v >= 0.0);
    let pass = violations == 0 && ratio > 1.0;
    report(3, pass, format!("containment violations {violations} (eps {eps:.3e}); area(V>=0)/area(h_ana>=0) = {ratio:.4}"));
    assert!(pass);
}

#[test]
fn criterion_4_property_suite() {
    let c = canon();
    let grid = c.field.grid();
    let game = c.game();
    let (controls, dstbs) = (c.controls(), c.dstbs());
    let nodes: Vec<usize> = (0..grid.node_count()).collect();
    // (V - g, |max min Q - V|, |min_d Q(x, fallback) - V| on V >= 0)
    let per_node: Vec<(f64, f64, f64)> = nodes
        .par_iter()
        .map(|i| {
            let x = grid.node(*i);
            let v = c.field.values()[*i];
            let mut best = f64::NEG_INFINITY;
            for u in controls.iter() {
                let worst = dstbs.iter().map(|d| game.q_value(&c.field, &x, u, d).unwrap()).fold(f64::INFINITY, f64::min);
                best = best.max(worst);
            }
            let fb = if v >= 0.0 {
                let (u, _) = game.fallback_action(&c.field, &x).unwrap();
                (game.robust_q(&c.field, &x, &u).unwrap().0 - v).abs()
            } else {
                0.0
            };
            (v - c.system.margin(&x), (best - v).abs(), fb)
        })
        .collect();
    let above_g = per_node.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let identity = per_node.iter().map(|p| p.1).fold(0.0, f64::max);
    let fallback = per_node.iter().map(|p| p.2).fold(0.0, f64::max);

    let xs = safe_states(c, 5000, 41);
    let us = uniform(&[-20.0], &[20.0], xs.len(), 42);
    let disagreements = xs
        .par_iter()
        .zip(&us)
        .filter(|(x, u)| {
            let th = c.beta().apply(c.field.interpolate(x).unwrap());
            let lhs = dstbs.iter().map(|d| game.q_value(&c.field, x, u, d).unwrap()).fold(f64::INFINITY, f64::min) >= th;
            let rhs = c.worst_next(x, u) >= th;
            lhs != rhs
        })
        .count();
    let pass = above_g <= 1e-12 && identity <= 1e-12 && fallback <= 1e-9 && disagreements == 0;
    report(
        4,
        pass,
        format!(
            "max(V - g) {above_g:.3e}; max |maxmin Q - V| {identity:.3e}; max |Q(x, fallback) - V| {fallback:.3e}; \
             robust-constraint equivalence disagreements {disagreements}/5000 (solver tolerance {:.0e})",
            c.cfg.solve.tolerance
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_recursive_feasibility() {
    let c = canon();
    let grid = c.field.grid();
    let eps = 2.0 * c.residuals(c.cfg.sets.residual_samples, 5).mean_abs;
    let filter = QcbfFilter::new(
        GridCertificate::new(&c.field, c.game()),
        c.beta(),
        c.controls(),
        c.system.control_box().clone(),
    )
    .unwrap();
    let task = PdController::new(c.cfg.filter.gains, c.system.control_box().clone());
    let nodes: Vec<usize> = (0..grid.node_count()).filter(|i| c.field.values()[*i] >= eps).collect();
    let (infeasible, post): (usize, usize) = nodes
        .par_iter()
        .map(|i| {
            let x = grid.node(*i);
            let mut bad = (0, 0);
            for ut in [task.control(&x), vec![-20.0], vec![0.0], vec![20.0]] {
                let out = filter.filter(&x, &ut);
                bad.0 += !out.feasible as usize;
                bad.1 += (c.worst_next(&x, &out.u_exec) < -eps) as usize;
            }
            bad
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let pass = infeasible == 0 && post == 0;
    report(
        5,
        pass,
        format!(
            "{} nodes with V >= eps ({eps:.3e}), 4 task inputs each: infeasible {infeasible}, post-step below -eps {post}",
            nodes.len()
        ),
    );
    assert!(pass);
}

/// Dense-enumeration minimizer of `|u - u_task|` under the robust constraint,
/// refined by bisection between the best dense point and its infeasible
/// neighbour. `None` when no dense point is feasible.
fn dense_oracle(c: &Canon, x: &[f64], ut: f64, th: f64) -> Option<f64> {
    let feasible = |u: f64| c.system.margin(x).min(c.worst_next(x, &[u])) >= th;
    if feasible(ut) {
        return Some(ut);
    }
    let n = 4001;
    let step = 40.0 / (n - 1) as f64;
    let mut best: Option<f64> = None;
    for k in 0..n {
        let u = -20.0 + step * k as f64;
        if feasible(u) && best.is_none_or(|b| (u - ut).abs() < (b - ut).abs()) {
            best = Some(u);
        }
    }
    let b = best?;
    let toward = if ut > b { (b + step).min(ut) } else { (b - step).max(ut) };
    let (mut lo, mut hi) = (b, toward);
    if feasible(hi) {
        return Some(hi);
    }
    while (hi - lo).abs() > 1e-9 {
        let m = 0.5 * (lo + hi);
        if feasible(m) {
            lo = m;
        } else {
            hi = m;
        }
    }
    Some(lo)
}

#[test]
fn criterion_6_filter_optimality() {
    let c = canon();
    let filter = QcbfFilter::new(
        GridCertificate::new(&c.field, c.game()),
        c.beta(),
        c.controls(),
        c.system.control_box().clone(),
    )
    .unwrap();
    let xs = safe_states(c, 1000, 61);
    let us = uniform(&[-20.0], &[20.0], xs.len(), 62);
    let results: Vec<(bool, f64)> = xs
        .par_iter()
        .zip(&us)
        .map(|(x, ut)| {
            let th = c.beta().apply(c.field.eval(x).0);
            let out = filter.filter(x, ut);
            match dense_oracle(c, x, ut[0], th) {
                Some(u) => (out.feasible && (out.u_exec[0] - u).abs() <= 1e-3, (out.u_exec[0] - u).abs()),
                None => (!out.feasible, 0.0),
            }
        })
        .collect();
    let mismatches = results.iter().filter(|r| !r.0).count();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let pass = mismatches == 0;
    report(6, pass, format!("{mismatches}/1000 states off the dense oracle by > 1e-3 (max gap {worst:.3e})"));
    assert!(pass);
}

#[test]
fn criterion_7_uncertainty_free_reduction() {
    let c = canon();
    let system = Pendulum::new(PendulumConfig { dstb_bound: 0.0, ..c.cfg.system }).unwrap();
    let controls = c.controls();
    let d0 = Discretization::from_points(1, vec![0.0]).unwrap();
    let hull = c.field.grid().hull();
    let xs = uniform(hull.lower(), hull.upper(), 10_000, 71);
    let us = uniform(&[-20.0], &[20.0], xs.len(), 72);
    let bits = |o: &qcbf_core::filters::FilterOutput| {
        (o.u_exec.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), o.constraint_margin.to_bits(), o.feasible, o.fallback_used)
    };
    let differ = xs
        .par_iter()
        .zip(&us)
        .filter(|(x, u)| {
            let a = qcbf_filter(x, u, &c.field, &system, c.beta(), &controls, &d0).unwrap();
            let b = qcbf_filter_nominal(x, u, &c.field, &system, c.beta(), &controls, &[0.0]).unwrap();
            let la = lrsf_filter(x, u, &c.field, &system, &controls, &d0).unwrap();
            let lb = lrsf_filter_nominal(x, u, &c.field, &system, &controls, &[0.0]).unwrap();
            bits(&a) != bits(&b) || bits(&la) != bits(&lb)
        })
        .count();
    let pass = differ == 0;
    report(7, pass, format!("{differ}/10000 pairs differ bitwise (Q-CBF and least-restrictive paths)"));
    assert!(pass);
}

fn final_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".json")))
        .collect();
    v.sort();
    v.pop()
}

fn gradients_match() -> bool {
    let p = Pendulum::canonical();
    let sbox = Bounds::new(vec![-1.2, -8.0], vec![1.2, 8.0]).unwrap();
    let (u, d) = (p.control_box().clone(), p.dstb_box().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let critic = Mlp::new(MlpSpec::new(&[&sbox, &u, &d], &[6, 5], OutputMap::Identity, 1), &mut rng).unwrap();
    let dstb = Mlp::new(MlpSpec::new(&[&sbox, &u], &[5, 4], OutputMap::squash(&d), 1), &mut rng).unwrap();
    let ctrl = Mlp::new(MlpSpec::new(&[&sbox], &[5, 4], OutputMap::squash(&u), 1), &mut rng).unwrap();
    let b = 5;
    let xs: Vec<f64> = uniform(sbox.lower(), sbox.upper(), b, 82).concat();
    let xu: Vec<f64> = xs.chunks(2).zip(uniform(&[-20.0], &[20.0], b, 83)).flat_map(|(x, u)| [x[0], x[1], u[0]]).collect();
    let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) || (fd - an).abs() < 1e-9;
    let h = 1e-6;
    let check = |net: &Mlp, grad: &[f64], f: &dyn Fn(&Mlp) -> f64| {
        (0..net.param_count()).all(|k| {
            let (mut a, mut m) = (net.clone(), net.clone());
            a.params_mut()[k] += h;
            m.params_mut()[k] -= h;
            close((f(&a) - f(&m)) / (2.0 * h), grad[k])
        })
    };
    let (_, gd) = dstb_objective_grad(&critic, &dstb, &xu, b);
    let (_, gc) = ctrl_objective_grad(&critic, &dstb, &ctrl, &xs, b);
    let xud: Vec<f64> = xu.chunks(3).flat_map(|r| [r[0], r[1], r[2], 0.7]).collect();
    let targets = vec![0.3, -0.2, 0.5, 0.0, 1.0];
    let (_, gq, _) = qcbf_core::learn::critic_loss_grad(&critic, &xud, &targets);
    check(&dstb, &gd, &|n| dstb_objective_grad(&critic, n, &xu, b).0)
        && check(&ctrl, &gc, &|n| ctrl_objective_grad(&critic, &dstb, n, &xs, b).0)
        && check(&critic, &gq, &|n| qcbf_core::learn::critic_loss_grad(n, &xud, &targets).0)
}

#[test]
fn criterion_8_learning_suite() {
    let c = canon();
    let art = root().join("artifacts/pendulum");
    let grads = gradients_match();
    let (controls, dstbs) = (c.controls(), c.dstbs());
    let nodes = strided_nodes(c.field.grid(), c.cfg.eval.stride);
    let truth: Vec<f64> = nodes.iter().map(|i| c.field.values()[*i]).collect();
    let mut rates = Vec::new();
    let mut library = Vec::new();
    let mut seed0 = None;
    for s in 0..c.cfg.train.runs as u64 {
        let Some(path) = final_checkpoint(&art.join(format!("train/seed-{}", c.cfg.seed + s))) else {
            rates.push(f64::NAN);
            continue;
        };
        let ck = read_checkpoint(&path).unwrap();
        let critic = ck.network("critic").unwrap();
        let pred: Vec<f64> = nodes
            .par_iter()
            .map(|i| neural_value(critic, &c.system, &c.field.grid().node(*i), &controls, &dstbs))
            .collect();
        rates.push(sign_agreement(&pred, &truth, c.cfg.eval.min_abs).rate);
        library.push(ck.network("ctrl").unwrap().clone());
        if s == 0 {
            seed0 = Some(ck);
        }
    }
    let agreement_ok = rates.iter().all(|r| *r >= 0.9);

    let br = read_checkpoint(&art.join("best-response.json")).ok();
    let (match_rate, probe) = match (&br, &seed0, library.is_empty()) {
        (Some(br), Some(ck), false) => {
            let dstb = br.network("dstb").unwrap();
            let bc = &c.cfg.best_response;
            let mut rng = ChaCha8Rng::seed_from_u64(c.cfg.seed ^ 0x5eed);
            let reset = Bounds::new(bc.reset_lower.clone(), bc.reset_upper.clone()).unwrap();
            let mut env =
                LibraryRollouts::new(&c.system, &library, reset, bc.exploration_noise, bc.episode_horizon, &mut rng).unwrap();
            let pairs: Vec<(Vec<f64>, Vec<f64>)> =
                (0..c.cfg.eval.match_pairs).map(|_| env.next_pair(dstb, &mut rng)).collect();
            let hits = pairs
                .par_iter()
                .filter(|(x, u)| matches_grid_argmin(dstb, &c.field, &c.system, &dstbs, x, u, c.cfg.eval.match_tolerance))
                .count();
            let samples: Vec<(Vec<f64>, Vec<f64>)> = pairs.iter().take(c.cfg.eval.probe_samples).cloned().collect();
            let probe = |d: &Mlp| {
                local_optimality_probe(
                    d,
                    ck.network("critic").unwrap(),
                    &samples,
                    1e-3,
                    c.cfg.eval.probe_perturbations,
                    c.cfg.eval.probe_delta,
                    c.cfg.seed,
                )
                .unwrap()
                .fraction
            };
            let worst = probe(dstb).max(probe(ck.network("dstb").unwrap()));
            (hits as f64 / pairs.len() as f64, worst)
        }
        _ => (f64::NAN, f64::NAN),
    };
    let pass = grads && agreement_ok && match_rate >= 0.85 && probe < 0.05;
    let rates_s: Vec<String> = rates.iter().map(|r| format!("{r:.4}")).collect();
    report(
        8,
        pass,
        format!(
            "(a) gradients {}; (b) sign agreement per seed [{}]; (c) best-response argmin match {match_rate:.4}; \
             (d) worst probe violation fraction at rho=1e-3 over the best-response and training disturbances {probe:.4}",
            if grads { "match" } else { "MISMATCH" },
            rates_s.join(", ")
        ),
    );
    assert!(pass);
}

const SMALL: &str = r#"{
  "schema": 1,
  "seed": 5,
  "grid": { "axes": [ { "min": -1.2, "max": 1.2, "count": 41 }, { "min": -8.0, "max": 8.0, "count": 41 } ] },
  "solve": { "control_points": 11, "dstb_points": 5, "tolerance": 1e-4 },
  "rollout": { "n": 4, "horizon": 80, "filters": ["qcbf", "lrsf", "ct-ana", "ct-heu"],
               "disturbances": ["best-response-grid", "zero", "random"] },
  "train": { "total_steps": 120, "eval_interval": 60, "warmup_steps": 20, "batch_size": 8, "buffer_capacity": 200,
             "runs": 2, "critic_hidden": [6], "actor_hidden": [6], "eval_episodes": 2, "episode_horizon": 30 },
  "best_response": { "steps": 80, "warmup_steps": 20, "batch_size": 8, "buffer_capacity": 200, "hidden": [6] },
  "sets": { "residual_samples": 200 },
  "eval": { "stride": 2, "probe_samples": 16, "probe_perturbations": 3, "match_pairs": 20 }
}"#;

fn qcbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcbf")).args(args).env("SOURCE_DATE_EPOCH", "1700000000").output().unwrap()
}

fn pipeline(cfg: &Path, out: &Path, threads: &str) -> bool {
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let (field, ck0, ck1, br) = (
        s(&out.join("value.json")),
        s(&out.join("train/seed-5/ckpt-00000120.json")),
        s(&out.join("train/seed-6/ckpt-00000120.json")),
        s(&out.join("best-response.json")),
    );
    let steps: Vec<Vec<&str>> = vec![
        vec!["solve"],
        vec!["sets", "--field", &field],
        vec!["train", "--field", &field],
        vec!["sets", "--field", &field, "--checkpoint", &ck0],
        vec!["rollout", "--field", &field, "--checkpoint", &ck0],
        vec!["train-br", "--library", &ck0, &ck1, "--critic", &ck0],
        vec!["eval-critic", "--checkpoint", &ck0, "--field", &field, "--dstb", &br, "--library", &ck0, &ck1],
    ];
    let (cfg, out) = (s(cfg), s(out));
    steps.iter().all(|step| {
        let mut args = vec![step[0], "--config", &cfg, "--out", &out, "--threads", threads];
        args.extend_from_slice(&step[1..]);
        qcbf(&args).status.success()
    })
}

fn data_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.file_name().unwrap().to_str().unwrap().starts_with("timing-") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_9_determinism() {
    canon();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let runs = [("a", "1"), ("b", "1"), ("c", "4")];
    let ok = runs.iter().all(|(d, t)| pipeline(&cfg, &dir.path().join(d), t));
    let files: Vec<_> = runs.iter().map(|(d, _)| data_files(&dir.path().join(d))).collect();
    let mut differing = Vec::new();
    for (k, v) in &files[0] {
        if files[1..].iter().any(|f| f.get(k) != Some(v)) {
            differing.push(k.display().to_string());
        }
    }
    let same_set = files[1..].iter().all(|f| f.keys().eq(files[0].keys()));
    let pass = ok && same_set && differing.is_empty() && files[0].len() > 20;
    report(
        9,
        pass,
        format!(
            "{} data files over 7 commands, rerun and 1 vs 4 threads: {} differ{}",
            files[0].len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    );
    assert!(pass);
}
