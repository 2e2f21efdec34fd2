use std::path::{Path, PathBuf};

use qcbf_core::learn::{
    describe_probe, local_optimality_probe, matches_grid_argmin, neural_value, sign_agreement, strided_nodes, Agreement,
    GridQ, LibraryRollouts, Mlp, ProbeReport, QFunction, QLift,
};
use qcbf_core::{BlackBoxSystem, Bounds, Discretization, FieldMeta, Grid, Pendulum, ScalarField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::Context;
use crate::checkpoint::{read_checkpoint, LoadedCheckpoint};
use crate::config::ExperimentConfig;
use crate::error::{AppError, AppResult};
use crate::field_io::read_field;

/// A critic read from a checkpoint: a network or a tabulated value field.
pub(super) enum Critic {
    Net(Mlp),
    Table { field: ScalarField, lift: QLift },
}

pub(super) fn load_critic(ck: &LoadedCheckpoint) -> AppResult<Critic> {
    if let Some(net) = ck.networks.get("critic") {
        return Ok(Critic::Net(net.clone()));
    }
    match (&ck.header.critic_table, ck.table_field_path()) {
        (Some(t), Some(path)) => Ok(Critic::Table { field: read_field(&path)?, lift: t.lift }),
        _ => Err(AppError::Input(format!("{}: checkpoint has no critic", ck.path.display()))),
    }
}

pub(super) fn discretizations(system: &Pendulum, cfg: &ExperimentConfig) -> AppResult<(Discretization, Discretization)> {
    Ok((
        system.control_box().discretize(cfg.solve.control_points)?,
        system.dstb_box().discretize(cfg.solve.dstb_points)?,
    ))
}

/// `min{ g(x), max_u min_d Q(x, u, d) }`.
pub(super) fn critic_value(
    critic: &Critic,
    system: &Pendulum,
    x: &[f64],
    controls: &Discretization,
    dstbs: &Discretization,
) -> f64 {
    match critic {
        Critic::Net(net) => neural_value(net, system, x, controls, dstbs),
        Critic::Table { field, lift } => {
            let q = GridQ { field, system, lift: *lift };
            let best = controls
                .iter()
                .map(|u| dstbs.iter().map(|d| q.q(x, u, d)).fold(f64::INFINITY, f64::min))
                .fold(f64::NEG_INFINITY, f64::max);
            system.margin(x).min(best)
        }
    }
}

fn values_at(critic: &Critic, system: &Pendulum, cfg: &ExperimentConfig, grid: &Grid, nodes: &[usize]) -> AppResult<Vec<f64>> {
    let (controls, dstbs) = discretizations(system, cfg)?;
    Ok(nodes.par_iter().map(|i| critic_value(critic, system, &grid.node(*i), &controls, &dstbs)).collect())
}

/// The critic's certificate value on every node of `grid`.
pub(super) fn critic_field(critic: &Critic, system: &Pendulum, cfg: &ExperimentConfig, grid: &Grid) -> AppResult<ScalarField> {
    let nodes: Vec<usize> = (0..grid.node_count()).collect();
    let values = values_at(critic, system, cfg, grid, &nodes)?;
    Ok(ScalarField::new(grid.clone(), values, FieldMeta { label: "critic max-min value".into(), ..Default::default() })?)
}

/// Sign agreement of the critic value with `field` on strided nodes.
pub(super) fn agreement(critic: &Critic, system: &Pendulum, cfg: &ExperimentConfig, field: &ScalarField) -> AppResult<Agreement> {
    let nodes = strided_nodes(field.grid(), cfg.eval.stride);
    let pred = values_at(critic, system, cfg, field.grid(), &nodes)?;
    let truth: Vec<f64> = nodes.iter().map(|i| field.values()[*i]).collect();
    Ok(sign_agreement(&pred, &truth, cfg.eval.min_abs))
}

#[derive(Debug, Clone, Serialize)]
pub struct ArgminMatch {
    pub pairs: usize,
    pub matched: usize,
    pub rate: f64,
    pub tolerance: f64,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    config_hash: &'a str,
    checkpoint_step: u64,
    critic: &'static str,
    agreement: Agreement,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    probe: Vec<ProbeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    argmin_match: Option<ArgminMatch>,
}

/// `n` `(x, u)` pairs from library rollouts against `dstb`.
pub(super) fn library_pairs(
    system: &Pendulum,
    library: &[Mlp],
    dstb: &Mlp,
    cfg: &ExperimentConfig,
    n: usize,
    seed: u64,
) -> AppResult<Vec<(Vec<f64>, Vec<f64>)>> {
    let br = &cfg.best_response;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reset = Bounds::new(br.reset_lower.clone(), br.reset_upper.clone())?;
    let mut env = LibraryRollouts::new(system, library, reset, br.exploration_noise, br.episode_horizon, &mut rng)?;
    Ok((0..n).map(|_| env.next_pair(dstb, &mut rng)).collect())
}

pub(super) fn load_library(paths: &[PathBuf]) -> AppResult<Vec<Mlp>> {
    paths.iter().map(|p| read_checkpoint(p).and_then(|ck| ck.network("ctrl").cloned())).collect()
}

pub fn run(ctx: &Context, checkpoint: &Path, field_path: &Path, dstb: Option<&Path>, library: &[PathBuf]) -> AppResult<()> {
    let cfg = &ctx.config;
    let system = Pendulum::new(cfg.system)?;
    let ck = read_checkpoint(checkpoint)?;
    let critic = load_critic(&ck)?;
    let field = read_field(field_path)?;
    let agree = agreement(&critic, &system, cfg, &field)?;
    println!(
        "sign agreement {:.4} ({}/{} nodes with |V| > {}), MAE {:.4e}",
        agree.rate, agree.agree, agree.nodes, cfg.eval.min_abs, agree.mae
    );

    let mut probe = Vec::new();
    let mut argmin_match = None;
    if let Some(dpath) = dstb {
        let dnet = read_checkpoint(dpath)?.network("dstb")?.clone();
        let lib = if library.is_empty() { vec![ck.network("ctrl")?.clone()] } else { load_library(library)? };
        let e = &cfg.eval;
        let pairs = library_pairs(&system, &lib, &dnet, cfg, e.probe_samples.max(e.match_pairs), cfg.seed)?;
        match &critic {
            Critic::Net(net) => {
                for (k, rho) in e.probe_radii.iter().enumerate() {
                    let r = local_optimality_probe(
                        &dnet,
                        net,
                        &pairs[..e.probe_samples],
                        *rho,
                        e.probe_perturbations,
                        e.probe_delta,
                        cfg.seed.wrapping_add(k as u64),
                    )?;
                    println!("probe {}", describe_probe(&r));
                    probe.push(r);
                }
            }
            Critic::Table { .. } => println!("probe skipped: the critic is a table"),
        }
        let (_, dstbs) = discretizations(&system, cfg)?;
        let matched = pairs[..e.match_pairs]
            .par_iter()
            .filter(|(x, u)| matches_grid_argmin(&dnet, &field, &system, &dstbs, x, u, e.match_tolerance))
            .count();
        let m = ArgminMatch {
            pairs: e.match_pairs,
            matched,
            rate: if e.match_pairs == 0 { 1.0 } else { matched as f64 / e.match_pairs as f64 },
            tolerance: e.match_tolerance,
        };
        println!("grid argmin match {:.4} ({}/{})", m.rate, m.matched, m.pairs);
        argmin_match = Some(m);
    }
    let report = EvalReport {
        config_hash: &ctx.hash,
        checkpoint_step: ck.header.step,
        critic: match critic {
            Critic::Net(_) => "network",
            Critic::Table { .. } => "table",
        },
        agreement: agree,
        probe,
        argmin_match,
    };
    ctx.write_json("eval.json", &report)?;
    Ok(())
}
