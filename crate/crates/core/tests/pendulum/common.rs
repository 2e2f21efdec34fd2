#![allow(dead_code)]

use std::sync::OnceLock;

use qcbf_core::isaacs::{solve, Game};
use qcbf_core::{Axis, Discretization, Grid, Pendulum, ScalarField, SolveConfig, SolveDiagnostics};

pub struct Fixture {
    pub system: Pendulum,
    pub config: SolveConfig,
    pub field: ScalarField,
    pub diag: SolveDiagnostics,
}

impl Fixture {
    pub fn game(&self) -> Game<'_, Pendulum> {
        Game::from_config(&self.system, &self.config).unwrap()
    }

    pub fn controls(&self) -> Discretization {
        self.game().controls
    }

    pub fn dstbs(&self) -> Discretization {
        self.game().dstbs
    }
}

pub fn grid(n: usize) -> Grid {
    Grid::new(vec![Axis { min: -1.2, max: 1.2, count: n }, Axis { min: -8.0, max: 8.0, count: n }]).unwrap()
}

/// Canonical undiscounted pendulum solve, shared by the tests of one binary.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let system = Pendulum::canonical();
        let config = SolveConfig::default();
        let (field, diag) = solve(&system, &grid(161), &config).unwrap();
        Fixture { system, config, field, diag }
    })
}

/// Deterministic uniform samples in a box.
pub fn uniform(lo: &[f64], hi: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| lo.iter().zip(hi).map(|(l, h)| rng.random_range(*l..*h)).collect()).collect()
}
