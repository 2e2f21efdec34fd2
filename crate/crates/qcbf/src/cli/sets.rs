use std::path::Path;

use qcbf_core::filters::{BarrierKind, ContinuousBarrier};
use qcbf_core::harness::{compute_set_metrics, containment_violations, node_values, SetMetrics};
use qcbf_core::isaacs::{bellman_residual, ResidualStats};
use qcbf_core::{Axis, Grid, Pendulum, ScalarField, ValueFunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::eval::{critic_field, load_critic};
use super::{csv_err, csv_writer, Context};
use crate::checkpoint::read_checkpoint;
use crate::error::{AppError, AppResult};
use crate::field_io::read_field;

#[derive(Serialize)]
struct SetsReport<'a> {
    config_hash: &'a str,
    metrics: &'a SetMetrics,
    /// Off-node Bellman residual of V, the interpolation error bound.
    residual: ResidualStats,
    epsilon: f64,
    /// Nodes with `h_ana >= 0` but `V < -epsilon`.
    h_ana_outside_v: usize,
    area_ratio_v_over_h_ana: f64,
}

/// Grid keeping every `stride`-th node of `grid` along each axis.
pub(super) fn coarse_grid(grid: &Grid, stride: usize) -> AppResult<Grid> {
    let axes = grid
        .axes()
        .iter()
        .map(|a| {
            let count = (a.count - 1) / stride + 1;
            Axis { min: a.min, max: a.min + ((count - 1) * stride) as f64 * a.spacing(), count }
        })
        .collect();
    Ok(Grid::new(axes)?)
}

/// Uniform samples in the grid hull.
pub(super) fn hull_samples(grid: &Grid, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| grid.axes().iter().map(|a| rng.random_range(a.min..a.max)).collect()).collect()
}

pub fn run(ctx: &Context, field_path: &Path, checkpoint: Option<&Path>) -> AppResult<()> {
    let cfg = &ctx.config;
    let system = Pendulum::new(cfg.system)?;
    let v = read_field(field_path)?;
    let grid = v.grid().clone();
    let heu = ContinuousBarrier::new(BarrierKind::Heuristic, cfg.filter.alpha);
    let ana = ContinuousBarrier::new(BarrierKind::Analytic, cfg.filter.alpha);

    let neural: Option<ScalarField> = match checkpoint {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            let critic = load_critic(&ck)?;
            let coarse = coarse_grid(&grid, cfg.sets.neural_stride)?;
            Some(critic_field(&critic, &system, cfg, &coarse)?)
        }
        None => None,
    };
    let mut fields: Vec<(&str, &dyn ValueFunction)> = vec![("V", &v), ("h_heu", &heu), ("h_ana", &ana)];
    if let Some(n) = &neural {
        fields.push(("neural", n));
    }
    let metrics = compute_set_metrics(&fields, &grid);

    let samples = hull_samples(&grid, cfg.sets.residual_samples, cfg.seed);
    let residual = bellman_residual(&v, &system, &samples, &cfg.solve)?;
    let epsilon = residual.max;
    let v_nodes = v.values();
    let ana_nodes = node_values(&ana, &grid);
    let h_ana_outside_v = containment_violations(&ana_nodes, 0.0, v_nodes, -epsilon);
    let report = SetsReport {
        config_hash: &ctx.hash,
        metrics: &metrics,
        residual,
        epsilon,
        h_ana_outside_v,
        area_ratio_v_over_h_ana: metrics.areas[0] / metrics.areas[2],
    };
    ctx.write_json("sets.json", &report)?;

    let path = ctx.path("sets-nodes.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["theta", "omega", "V", "h_heu", "h_ana"];
    if neural.is_some() {
        header.push("neural");
    }
    w.write_record(&header).map_err(csv_err(&path))?;
    let heu_nodes = node_values(&heu, &grid);
    let neural_nodes = neural.as_ref().map(|n| node_values(n, &grid));
    for i in 0..grid.node_count() {
        let x = grid.node(i);
        let mut row = vec![x[0], x[1], v_nodes[i], heu_nodes[i], ana_nodes[i]];
        if let Some(n) = &neural_nodes {
            row.push(n[i]);
        }
        w.write_record(row.iter().map(|c| c.to_string())).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| AppError::io(&path)(e))?;

    for (k, name) in metrics.names.iter().enumerate() {
        println!("{name:>8}: area {:.4}, safe nodes {}", metrics.areas[k], metrics.safe_nodes[k]);
    }
    println!(
        "epsilon {:.3e}; h_ana nodes outside V >= -epsilon: {}; area(V)/area(h_ana) = {:.4}",
        epsilon, h_ana_outside_v, report.area_ratio_v_over_h_ana
    );
    Ok(())
}
