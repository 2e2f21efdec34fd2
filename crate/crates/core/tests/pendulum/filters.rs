use crate::common::{fixture, uniform};
use qcbf_core::filters::{
    lrsf_filter, lrsf_filter_nominal, qcbf_filter, qcbf_filter_nominal, ContinuousBarrier, GridCertificate, PdController,
    PdGains, QCertificate, QcbfFilter, SafetyFilter, TaskController,
};
use qcbf_core::isaacs::bellman_residual;
use qcbf_core::{BlackBoxSystem, ClassKMap, Discretization, Pendulum, PendulumConfig};

fn safe_samples(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let f = fixture();
    let hull = f.field.grid().hull();
    let mut out = Vec::new();
    let mut k = 0;
    while out.len() < n {
        for x in uniform(hull.lower(), hull.upper(), 4 * n, seed + k) {
            if f.field.eval(&x).0 >= 0.0 && out.len() < n {
                out.push(x);
            }
        }
        k += 1000;
    }
    out
}

fn grid_filter(beta: ClassKMap) -> QcbfFilter<GridCertificate<'static, Pendulum>> {
    let f = fixture();
    QcbfFilter::new(GridCertificate::new(&f.field, f.game()), beta, f.controls(), f.system.control_box().clone()).unwrap()
}

fn worst_next(x: &[f64], u: &[f64], dstbs: &Discretization) -> f64 {
    let f = fixture();
    let mut next = [0.0; 2];
    dstbs
        .iter()
        .map(|d| {
            f.system.step(x, u, d, &mut next).unwrap();
            f.field.interpolate(&next).unwrap()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn robust_constraint_equals_the_successor_condition() {
    let f = fixture();
    let game = f.game();
    let beta = ClassKMap::default();
    let xs = safe_samples(2000, 11);
    let us = uniform(&[-20.0], &[20.0], xs.len(), 12);
    let mut disagree = 0;
    for (x, u) in xs.iter().zip(&us) {
        let th = beta.apply(f.field.eval(x).0);
        let lhs = game.dstbs.iter().map(|d| game.q_value(&f.field, x, u, d).unwrap()).fold(f64::INFINITY, f64::min) >= th;
        let rhs = worst_next(x, u, &game.dstbs) >= th;
        disagree += (lhs != rhs) as usize;
    }
    assert_eq!(disagree, 0);
}

#[test]
fn executed_control_is_optimal_on_a_finer_enumeration() {
    let f = fixture();
    let beta = ClassKMap::default();
    let filter = grid_filter(beta);
    let fine = f.system.control_box().discretize(401).unwrap();
    let xs = safe_samples(150, 21);
    let us = uniform(&[-20.0], &[20.0], xs.len(), 22);
    let mut checked = 0;
    for (x, ut) in xs.iter().zip(&us) {
        let out = filter.filter(x, ut);
        if !out.feasible {
            continue;
        }
        checked += 1;
        assert!(out.constraint_margin >= 0.0);
        let th = beta.apply(f.field.eval(x).0);
        let gap = (out.u_exec[0] - ut[0]).abs();
        for u in fine.iter() {
            if filter.certificate.worst_q(x, u) >= th {
                assert!((u[0] - ut[0]).abs() >= gap - fine.spacing(), "x {x:?} task {ut:?}: {u:?} beats {:?}", out.u_exec);
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn uncertainty_free_paths_are_bitwise_identical() {
    let f = fixture();
    let system = Pendulum::new(PendulumConfig { dstb_bound: 0.0, ..PendulumConfig::default() }).unwrap();
    let controls = f.controls();
    let d0 = Discretization::from_points(1, vec![0.0]).unwrap();
    let hull = f.field.grid().hull();
    let xs = uniform(hull.lower(), hull.upper(), 2000, 31);
    let us = uniform(&[-25.0], &[25.0], xs.len(), 32);
    let beta = ClassKMap::default();
    for (x, u) in xs.iter().zip(&us) {
        let a = qcbf_filter(x, u, &f.field, &system, beta, &controls, &d0).unwrap();
        let b = qcbf_filter_nominal(x, u, &f.field, &system, beta, &controls, &[0.0]).unwrap();
        assert_eq!(a.u_exec[0].to_bits(), b.u_exec[0].to_bits());
        assert_eq!(a.constraint_margin.to_bits(), b.constraint_margin.to_bits());
        assert_eq!((a.feasible, a.fallback_used, a.intervened), (b.feasible, b.fallback_used, b.intervened));
        let a = lrsf_filter(x, u, &f.field, &system, &controls, &d0).unwrap();
        let b = lrsf_filter_nominal(x, u, &f.field, &system, &controls, &[0.0]).unwrap();
        assert_eq!(a.u_exec[0].to_bits(), b.u_exec[0].to_bits());
        assert_eq!(a.fallback_used, b.fallback_used);
    }
}

#[test]
fn least_restrictive_filter_passes_whenever_the_q_cbf_filter_does() {
    let f = fixture();
    let beta = ClassKMap::default();
    let xs = safe_samples(1000, 41);
    let us = uniform(&[-20.0], &[20.0], xs.len(), 42);
    let mut slack = 0;
    for (x, u) in xs.iter().zip(&us) {
        let q = qcbf_filter(x, u, &f.field, &f.system, beta, &f.controls(), &f.dstbs()).unwrap();
        if q.intervened {
            continue;
        }
        slack += 1;
        let l = lrsf_filter(x, u, &f.field, &f.system, &f.controls(), &f.dstbs()).unwrap();
        assert!(!l.intervened);
        assert_eq!(q.u_exec, l.u_exec);
    }
    assert!(slack > 100);
}

#[test]
fn analytic_barrier_is_valid_and_inside_the_value_set() {
    let f = fixture();
    let h = ContinuousBarrier::analytic();
    let g = f.field.grid();
    let samples = uniform(g.hull().lower(), g.hull().upper(), 2000, 51);
    let eps = bellman_residual(&f.field, &f.system, &samples, &f.config).unwrap().max;
    let controls = f.system.control_box().discretize(41).unwrap();
    let mut inside = 0;
    for i in 0..g.node_count() {
        let x = g.node(i);
        let hv = h.evaluate(x[0], x[1]);
        if hv < 0.0 {
            continue;
        }
        inside += 1;
        let best = controls.iter().map(|u| h.worst_hdot(&f.system, x[0], x[1], u[0])).fold(f64::NEG_INFINITY, f64::max);
        assert!(best >= -h.alpha.apply(hv) - 1e-9, "node {x:?}: h {hv}, best h_dot {best}");
        assert!(f.field.values()[i] >= -eps, "node {x:?}: V {}", f.field.values()[i]);
    }
    assert!(inside > 1000);
}

#[test]
fn filter_stays_feasible_from_nodes_well_inside_the_set() {
    let f = fixture();
    let g = f.field.grid();
    let samples = uniform(g.hull().lower(), g.hull().upper(), 2000, 61);
    let eps = 2.0 * bellman_residual(&f.field, &f.system, &samples, &f.config).unwrap().mean_abs;
    let filter = grid_filter(ClassKMap::default());
    let task = PdController::new(PdGains::default(), f.system.control_box().clone());
    let dstbs = f.dstbs();
    let mut visited = 0;
    for i in 0..g.node_count() {
        if f.field.values()[i] < eps {
            continue;
        }
        let x = g.node(i);
        for ut in [task.control(&x), vec![20.0], vec![-20.0]] {
            let out = filter.filter(&x, &ut);
            assert!(out.feasible, "node {x:?} task {ut:?}");
            let post = worst_next(&x, &out.u_exec, &dstbs);
            assert!(post >= -eps, "node {x:?} task {ut:?}: post-step value {post}");
        }
        visited += 1;
    }
    assert!(visited > 1000);
}
