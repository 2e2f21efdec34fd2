use std::path::Path;

use qcbf_core::filters::{
    BarrierKind, ContinuousBarrier, CtCbfFilter, GridCertificate, LrsfFilter, NoFilter, PdController, QcbfFilter,
    SafetyFilter,
};
use qcbf_core::harness::{
    deviation_stats, rollout, sample_boundary_states, BestResponseGrid, DeviationStats, DisturbancePolicy,
    RandomDisturbance, Trajectory, ZeroDisturbance,
};
use qcbf_core::isaacs::Game;
use qcbf_core::learn::{Mlp, NeuralCertificate, NeuralDisturbance};
use qcbf_core::{BlackBoxSystem, Pendulum, ScalarField};
use rayon::prelude::*;
use serde::Serialize;

use super::eval::{critic_field, discretizations, Critic};
use super::sets::coarse_grid;
use super::{csv_err, csv_writer, Context};
use crate::checkpoint::{read_checkpoint, LoadedCheckpoint};
use crate::config::{CertificateSource, DisturbanceMode, FilterKind};
use crate::error::{AppError, AppResult};
use crate::field_io::read_field;

#[derive(Serialize)]
struct ComboSummary {
    filter: &'static str,
    disturbance: &'static str,
    n: usize,
    safe: usize,
    safe_rate: f64,
    interventions: usize,
    min_margin: f64,
    deviation: DeviationStats,
    starts: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct RolloutSummary<'a> {
    config_hash: &'a str,
    band: f64,
    horizon: u64,
    results: Vec<ComboSummary>,
}

type DynFilter<'a> = Box<dyn SafetyFilter + Send + Sync + 'a>;

fn missing(what: &str, kind: FilterKind) -> AppError {
    AppError::Input(format!("filter '{}' needs {what}", kind.name()))
}

struct Artifacts<'a> {
    system: &'a Pendulum,
    value: Option<&'a ScalarField>,
    checkpoint: Option<&'a LoadedCheckpoint>,
}

/// The filter and its certificate's value field.
fn build<'a>(ctx: &Context, kind: FilterKind, art: &Artifacts<'a>) -> AppResult<(DynFilter<'a>, Option<ScalarField>)> {
    let cfg = &ctx.config;
    let system = art.system;
    let (controls, dstbs) = discretizations(system, cfg)?;
    let ubox = system.control_box().clone();
    let grid = art.value.map(|v| v.grid().clone()).unwrap_or_else(|| cfg.grid.clone());
    let barrier = |b: BarrierKind| -> AppResult<(DynFilter<'a>, Option<ScalarField>)> {
        let barrier = ContinuousBarrier::new(b, cfg.filter.alpha);
        let field = ScalarField::from_fn(grid.clone(), &format!("{b:?} barrier"), |x| barrier.evaluate(x[0], x[1]))?;
        Ok((Box::new(CtCbfFilter { barrier, pendulum: system }), Some(field)))
    };
    match (kind, cfg.filter.certificate) {
        (FilterKind::CtAna, _) => barrier(BarrierKind::Analytic),
        (FilterKind::CtHeu, _) => barrier(BarrierKind::Heuristic),
        (FilterKind::None, _) => Ok((Box::new(NoFilter { control_box: ubox }), art.value.cloned())),
        (FilterKind::Qcbf | FilterKind::Lrsf, CertificateSource::Grid) => {
            let v = art.value.ok_or_else(|| missing("a value field (--field)", kind))?;
            let cert = GridCertificate::new(v, Game::with_discretizations(system, controls.clone(), dstbs)?);
            let f: DynFilter<'a> = if kind == FilterKind::Qcbf {
                Box::new(QcbfFilter::new(cert, cfg.filter.beta, controls, ubox)?)
            } else {
                Box::new(LrsfFilter { certificate: cert, control_box: ubox })
            };
            Ok((f, Some(v.clone())))
        }
        (FilterKind::Qcbf | FilterKind::Lrsf, CertificateSource::Neural) => {
            let ck = art.checkpoint.ok_or_else(|| missing("a training checkpoint (--checkpoint)", kind))?;
            let (critic, ctrl, dstb) = (ck.network("critic")?, ck.network("ctrl")?, ck.network("dstb")?);
            let cert = NeuralCertificate { critic, ctrl, dstb, system };
            let f: DynFilter<'a> = if kind == FilterKind::Qcbf {
                Box::new(QcbfFilter::new(cert, cfg.filter.beta, controls, ubox)?)
            } else {
                Box::new(LrsfFilter { certificate: cert, control_box: ubox })
            };
            let coarse = coarse_grid(&grid, cfg.sets.neural_stride)?;
            let field = critic_field(&Critic::Net(critic.clone()), system, cfg, &coarse)?;
            Ok((f, Some(field)))
        }
    }
}

fn write_trajectory(path: &Path, tr: &Trajectory, cert: Option<&ScalarField>, dt: f64) -> AppResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", "theta", "omega", "u_task", "u_exec", "F", "margin", "V"]).map_err(csv_err(path))?;
    for k in 0..tr.len() {
        let x = &tr.states[k];
        let v = cert.map(|f| f.eval(x).0.to_string()).unwrap_or_default();
        w.write_record([
            (k as f64 * dt).to_string(),
            x[0].to_string(),
            x[1].to_string(),
            tr.u_task[k][0].to_string(),
            tr.u_exec[k][0].to_string(),
            tr.d_applied[k][0].to_string(),
            tr.margins[k].to_string(),
            v,
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| AppError::io(path)(e))
}

pub fn run(ctx: &Context, field: Option<&Path>, checkpoint: Option<&Path>, dstb_path: Option<&Path>) -> AppResult<()> {
    let cfg = &ctx.config;
    let rc = &cfg.rollout;
    let system = Pendulum::new(cfg.system)?;
    let value = field.map(read_field).transpose()?;
    let ck = checkpoint.map(read_checkpoint).transpose()?;
    let dstb_net: Option<Mlp> = match dstb_path {
        Some(p) => Some(read_checkpoint(p)?.network("dstb")?.clone()),
        None => ck.as_ref().and_then(|c| c.networks.get("dstb").cloned()),
    };
    let art = Artifacts { system: &system, value: value.as_ref(), checkpoint: ck.as_ref() };
    let (_, dstbs) = discretizations(&system, cfg)?;
    let task = PdController::new(cfg.filter.gains, system.control_box().clone());
    let dt = cfg.system.dt;

    let mut results = Vec::new();
    println!("{:<8} {:<22} {:>6}", "filter", "disturbance", "safe");
    for kind in cfg.rollout_filters() {
        let (filter, cert) = build(ctx, kind, &art)?;
        let starts = match &rc.x0 {
            Some(x0) => vec![x0.clone(); rc.n],
            None => {
                let w = cert.as_ref().ok_or_else(|| missing("a value field to sample boundary states", kind))?;
                sample_boundary_states(w, rc.n, rc.band, cfg.seed)?
            }
        };
        for mode in &rc.disturbances {
            let make = |i: usize| -> AppResult<Box<dyn DisturbancePolicy + '_>> {
                Ok(match mode {
                    DisturbanceMode::BestResponseGrid => {
                        let w = cert.as_ref().ok_or_else(|| missing("a certificate field for best-response-grid", kind))?;
                        Box::new(BestResponseGrid { field: w, system: &system, dstbs: dstbs.clone() })
                    }
                    DisturbanceMode::BestResponseNeural => Box::new(NeuralDisturbance(
                        dstb_net.as_ref().ok_or_else(|| missing("a disturbance checkpoint (--dstb)", kind))?,
                    )),
                    DisturbanceMode::Zero => Box::new(ZeroDisturbance::new(system.dstb_box())),
                    DisturbanceMode::Random => Box::new(RandomDisturbance::new(
                        system.dstb_box().clone(),
                        cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64),
                    )),
                })
            };
            make(0)?;
            let trajs: Vec<Trajectory> = starts
                .par_iter()
                .enumerate()
                .map(|(i, x0)| {
                    let mut policy = make(i).expect("disturbance checked above");
                    rollout(&system, &*filter, &task, &mut *policy, x0, rc.horizon as usize)
                })
                .collect();
            let dir = ctx.out.join("rollout").join(kind.name()).join(mode.name());
            for (i, tr) in trajs.iter().enumerate() {
                write_trajectory(&dir.join(format!("traj-{i:03}.csv")), tr, cert.as_ref(), dt)?;
            }
            let safe = trajs.iter().filter(|t| t.safe).count();
            println!("{:<8} {:<22} {:>3}/{}", kind.name(), mode.name(), safe, rc.n);
            results.push(ComboSummary {
                filter: kind.name(),
                disturbance: mode.name(),
                n: rc.n,
                safe,
                safe_rate: if rc.n == 0 { 1.0 } else { safe as f64 / rc.n as f64 },
                interventions: trajs.iter().map(|t| t.interventions).sum(),
                min_margin: trajs.iter().map(|t| t.min_margin).fold(f64::INFINITY, f64::min),
                deviation: deviation_stats(&trajs, cfg.system.control_bound)?,
                starts: starts.clone(),
            });
        }
    }
    ctx.write_json("rollout-summary.json", &RolloutSummary { config_hash: &ctx.hash, band: rc.band, horizon: rc.horizon, results })?;
    Ok(())
}
