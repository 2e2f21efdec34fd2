use std::path::{Path, PathBuf};

use qcbf_core::learn::{train_best_response, train_isaacs, LogRow};
use qcbf_core::{Error, Pendulum};
use serde::Serialize;

use super::eval::{agreement, load_library, Critic};
use super::{csv_err, csv_writer, write_json, Context};
use crate::checkpoint::{header_for, read_checkpoint, write_agents, write_checkpoint};
use crate::error::{AppError, AppResult};
use crate::field_io::read_field;

pub const BEST_RESPONSE_FILE: &str = "best-response.json";

#[derive(Debug, Clone, Serialize)]
struct Row {
    #[serde(flatten)]
    log: LogRow,
    sign_agreement: Option<f64>,
    mae: Option<f64>,
}

#[derive(Serialize)]
struct AbortPayload<'a> {
    seed: u64,
    step: u64,
    what: &'a str,
    last_checkpoint: Option<String>,
    log: &'a [Row],
}

pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("train").join(format!("seed-{seed}"))
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:08}.json")
}

fn write_log(path: &Path, rows: &[Row]) -> AppResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "critic_loss", "mean_q", "eval_safe_rate", "sign_agreement", "mae"]).map_err(csv_err(path))?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.log.step.to_string(),
            r.log.critic_loss.to_string(),
            r.log.mean_q.to_string(),
            r.log.eval_safe_rate.to_string(),
            opt(r.sign_agreement),
            opt(r.mae),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| AppError::io(path)(e))
}

pub fn run(ctx: &Context, field_path: Option<&Path>) -> AppResult<()> {
    let cfg = &ctx.config;
    let system = Pendulum::new(cfg.system)?;
    let field = field_path.map(read_field).transpose()?;
    let mut finals = Vec::new();
    for run in 0..cfg.train.runs {
        let seed = cfg.seed.wrapping_add(run as u64);
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let dir = run_dir(&ctx.out, seed);
        std::fs::create_dir_all(&dir).map_err(AppError::io(&dir))?;
        let mut rows: Vec<Row> = Vec::new();
        let mut last: Option<String> = None;
        let result = train_isaacs(&system, &tc, |ck, log| {
            let name = checkpoint_name(ck.step);
            write_agents(&dir.join(&name), ck, &ctx.hash).map_err(|e| Error::Config(e.to_string()))?;
            last = Some(name);
            let agree = match &field {
                Some(f) => Some(
                    agreement(&Critic::Net(ck.agents.critic.clone()), &system, cfg, f)
                        .map_err(|e| Error::Config(e.to_string()))?,
                ),
                None => None,
            };
            let row = Row { log: *log, sign_agreement: agree.map(|a| a.rate), mae: agree.map(|a| a.mae) };
            println!(
                "seed {seed} step {:>8} loss {:.4e} mean_q {:.4} safe {:.2}{}",
                log.step,
                log.critic_loss,
                log.mean_q,
                log.eval_safe_rate,
                agree.map(|a| format!(" agreement {:.4} mae {:.4}", a.rate, a.mae)).unwrap_or_default()
            );
            rows.push(row);
            Ok(())
        });
        write_log(&dir.join("log.csv"), &rows)?;
        match result {
            Ok(_) => finals.push(rows.last().cloned()),
            Err(Error::Numerical { step, what }) => {
                let payload = dir.join("abort.json");
                write_json(&payload, &AbortPayload { seed, step, what: &what, last_checkpoint: last, log: &rows })?;
                return Err(AppError::Numerical { message: format!("seed {seed}: non-finite {what} at step {step}"), payload });
            }
            Err(e) => return Err(e.into()),
        }
    }
    ctx.write_json("train-summary.json", &finals)?;
    Ok(())
}

pub fn run_best_response(ctx: &Context, library: &[PathBuf], critic_path: &Path) -> AppResult<()> {
    let cfg = &ctx.config;
    let system = Pendulum::new(cfg.system)?;
    let ck = read_checkpoint(critic_path)?;
    let critic = ck.network("critic")?;
    let lib = load_library(library)?;
    let mut brc = cfg.best_response.clone();
    brc.seed = cfg.seed;
    let dstb = match train_best_response(critic, &lib, &system, &brc) {
        Ok(d) => d,
        Err(Error::Numerical { step, what }) => {
            let payload = ctx.path("best-response-abort.json");
            write_json(&payload, &serde_json::json!({ "seed": cfg.seed, "step": step, "what": what }))?;
            return Err(AppError::Numerical { message: format!("non-finite {what} at step {step}"), payload });
        }
        Err(e) => return Err(e.into()),
    };
    let path = ctx.path(BEST_RESPONSE_FILE);
    write_checkpoint(&path, header_for(brc.steps, cfg.seed, ck.header.gamma_env, &ctx.hash), &[("dstb", &dstb)])?;
    println!("wrote {} ({} library controllers, {} steps)", path.display(), lib.len(), brc.steps);
    Ok(())
}
