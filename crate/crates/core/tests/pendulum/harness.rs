use crate::common::{fixture, uniform};
use qcbf_core::filters::{GridCertificate, PdController, PdGains, QcbfFilter};
use qcbf_core::harness::{frozen_best_response, rollout, sample_boundary_states, DisturbancePolicy};
use qcbf_core::isaacs::bellman_residual;
use qcbf_core::{BlackBoxSystem, ClassKMap};

#[test]
fn rollouts_from_inside_the_set_stay_safe_under_the_best_response() {
    let f = fixture();
    let g = f.field.grid();
    let samples = uniform(g.hull().lower(), g.hull().upper(), 2000, 71);
    let eps = bellman_residual(&f.field, &f.system, &samples, &f.config).unwrap().max;
    let filter = QcbfFilter::new(
        GridCertificate::new(&f.field, f.game()),
        ClassKMap::default(),
        f.controls(),
        f.system.control_box().clone(),
    )
    .unwrap();
    let task = PdController::new(PdGains::default(), f.system.control_box().clone());
    let starts = sample_boundary_states(&f.field, 400, 0.3, 7).unwrap();
    for x0 in starts.into_iter().filter(|x| f.field.eval(x).0 >= 0.15).take(20) {
        let mut br = frozen_best_response(&f.field, &f.system, f.dstbs());
        let tr = rollout(&f.system, &filter, &task, &mut br, &x0, 500);
        assert!(tr.safe, "from {x0:?}: min margin {}", tr.min_margin);
        assert_eq!(tr.steps(), 500);
        for x in &tr.states {
            assert!(f.field.eval(x).0 >= -eps, "left the value set at {x:?}");
        }
        let again = rollout(&f.system, &filter, &task, &mut frozen_best_response(&f.field, &f.system, f.dstbs()), &x0, 500);
        assert_eq!(tr, again);
    }
}

#[test]
fn best_response_is_the_first_grid_argmin_inside_the_box() {
    let f = fixture();
    let hull = f.field.grid().hull();
    let xs = uniform(hull.lower(), hull.upper(), 500, 81);
    let us = uniform(&[-20.0], &[20.0], xs.len(), 82);
    let dstbs = f.dstbs();
    let mut br = frozen_best_response(&f.field, &f.system, dstbs.clone());
    let mut next = [0.0; 2];
    for (x, u) in xs.iter().zip(&us) {
        let d = br.disturbance(x, u);
        assert!(f.system.dstb_box().contains(&d));
        let vals: Vec<f64> = dstbs
            .iter()
            .map(|d| {
                f.system.transition(x, u, d, &mut next);
                f.field.eval(&next).0
            })
            .collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let first = vals.iter().position(|v| *v == min).unwrap();
        assert_eq!(d, dstbs.get(first));
    }
}
