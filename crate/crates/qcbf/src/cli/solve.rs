use qcbf_core::isaacs::solve_with;
use qcbf_core::{Error, Pendulum, SolveDiagnostics};

use super::Context;
use crate::error::{AppError, AppResult};
use crate::exec::RayonExecutor;
use crate::field_io::write_field;

pub const FIELD_FILE: &str = "value.json";
pub const DIAGNOSTICS_FILE: &str = "solve-diagnostics.json";

fn report(ctx: &Context, diag: &SolveDiagnostics) -> AppResult<()> {
    let mut d = diag.clone();
    d.wall_time_s = None;
    ctx.write_json(DIAGNOSTICS_FILE, &d)?;
    Ok(())
}

pub fn run(ctx: &Context) -> AppResult<()> {
    let cfg = &ctx.config;
    let system = Pendulum::new(cfg.system)?;
    match solve_with(&system, &cfg.grid, &cfg.solve, &RayonExecutor) {
        Ok((field, diag)) => {
            report(ctx, &diag)?;
            write_field(&ctx.path(FIELD_FILE), &field)?;
            println!(
                "converged in {} sweeps, residual {:.3e}, clamped safe nodes {}{}",
                diag.iterations,
                diag.final_residual,
                diag.clamped_safe_nodes,
                if diag.valid { "" } else { " (safe set touches the grid hull)" }
            );
            println!("wrote {}", ctx.path(FIELD_FILE).display());
            Ok(())
        }
        Err(Error::NonConvergence(diag)) => {
            report(ctx, &diag)?;
            Err(AppError::NonConvergence(format!(
                "no convergence after {} sweeps: residual {:.6e} > tolerance {:e}",
                diag.iterations, diag.final_residual, cfg.solve.tolerance
            )))
        }
        Err(e) => Err(e.into()),
    }
}
