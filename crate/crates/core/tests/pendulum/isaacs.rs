use crate::common::{fixture, grid};
use qcbf_core::isaacs::{bellman_backup, solve, solve_with, Sequential, SweepExecutor};
use qcbf_core::learn::{critic_target, GridFallback, GridQ, QLift, Transition};
use qcbf_core::{BlackBoxSystem, FieldMeta, Pendulum, ScalarField, SolveConfig, SolveMode};

#[test]
fn fixture_converges_without_clamping() {
    let f = fixture();
    assert!(f.diag.final_residual <= 1e-6);
    assert!(f.diag.valid, "{} clamped safe nodes", f.diag.clamped_safe_nodes);
}

#[test]
fn value_never_exceeds_margin() {
    let f = fixture();
    let g = f.field.grid();
    for i in 0..g.node_count() {
        let x = g.node(i);
        assert!(f.field.values()[i] <= f.system.margin(&x) + 1e-12, "node {i}");
    }
}

#[test]
fn value_is_the_max_min_of_the_q_lift() {
    let f = fixture();
    let game = f.game();
    let g = f.field.grid();
    let mut worst = 0.0f64;
    for i in 0..g.node_count() {
        let x = g.node(i);
        let mut best = f64::NEG_INFINITY;
        for u in game.controls.iter() {
            let mut m = f64::INFINITY;
            for d in game.dstbs.iter() {
                m = m.min(game.q_value(&f.field, &x, u, d).unwrap());
            }
            best = best.max(m);
        }
        worst = worst.max((best - f.field.values()[i]).abs());
    }
    // Converged to the sweep tolerance; the identity is exact up to it.
    assert!(worst <= f.config.tolerance, "max |maxmin Q - V| = {worst:e}");
}

#[test]
fn fallback_attains_the_value_on_the_safe_set() {
    let f = fixture();
    let game = f.game();
    let g = f.field.grid();
    for i in 0..g.node_count() {
        let v = f.field.values()[i];
        if v < 0.0 {
            continue;
        }
        let x = g.node(i);
        let (u, val) = game.fallback_action(&f.field, &x).unwrap();
        let (rq, _) = game.robust_q(&f.field, &x, &u).unwrap();
        assert_eq!(rq, val);
        assert!((rq - v).abs() <= f.config.tolerance + 1e-9, "node {i}: {rq} vs {v}");
    }
}

#[test]
fn sweeps_from_the_margin_never_increase() {
    let system = Pendulum::canonical();
    let config = SolveConfig { control_points: 11, dstb_points: 5, ..SolveConfig::default() };
    let gr = grid(31);
    let mut field = ScalarField::from_fn(gr.clone(), "g", |x| system.margin(x)).unwrap();
    for _ in 0..25 {
        let next: Vec<f64> = (0..gr.node_count())
            .map(|i| bellman_backup(&field, &system, &gr.node(i), &config).unwrap())
            .collect();
        for (a, b) in next.iter().zip(field.values()) {
            assert!(*a <= *b + 1e-12);
        }
        field = ScalarField::new(gr.clone(), next, FieldMeta::default()).unwrap();
    }
}

/// Visits indices from the back in uneven chunks, like a work-stealing pool.
struct Shuffled;

impl SweepExecutor for Shuffled {
    fn map_range<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
        let mut i = n;
        let mut chunk = 1;
        while i > 0 {
            let lo = i.saturating_sub(chunk);
            for k in (lo..i).rev() {
                out[k] = Some(f(k));
            }
            i = lo;
            chunk = chunk * 3 % 17 + 1;
        }
        out.into_iter().map(Option::unwrap).collect()
    }
}

#[test]
fn solve_is_bit_identical_across_runs_and_executors() {
    let system = Pendulum::canonical();
    let config = SolveConfig { control_points: 11, dstb_points: 5, tolerance: 1e-4, ..SolveConfig::default() };
    let (a, da) = solve(&system, &grid(41), &config).unwrap();
    let (b, _) = solve_with(&system, &grid(41), &config, &Sequential).unwrap();
    let (c, dc) = solve_with(&system, &grid(41), &config, &Shuffled).unwrap();
    let bits = |f: &ScalarField| f.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&a), bits(&c));
    assert_eq!(da.residual_history, dc.residual_history);
}

#[test]
fn discounted_field_is_a_fixed_point_of_the_critic_target() {
    let system = Pendulum::canonical();
    let gamma = 0.95;
    let config = SolveConfig {
        mode: SolveMode::Discounted,
        gamma_env: gamma,
        control_points: 11,
        dstb_points: 5,
        tolerance: 1e-9,
        ..SolveConfig::default()
    };
    let (field, _) = solve(&system, &grid(41), &config).unwrap();
    let q = GridQ { field: &field, system: &system, lift: QLift::Next };
    let policy = GridFallback { field: &field, game: qcbf_core::isaacs::Game::from_config(&system, &config).unwrap() };
    let g = field.grid();
    let mut worst = 0.0f64;
    for i in 0..g.node_count() {
        let xn = g.node(i);
        let t = Transition { x: xn.clone(), u: vec![0.0], d: vec![0.0], g_next: system.margin(&xn), x_next: xn };
        let target = critic_target(&t, &q, &policy, &policy, gamma);
        worst = worst.max((target - field.values()[i]).abs());
    }
    assert!(worst < 1e-4, "critic residual {worst:e}");
}
