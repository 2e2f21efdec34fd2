//! `qcbf` subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{AppError, AppResult};
use crate::exec::thread_pool;

mod eval;
mod rollout;
mod sets;
mod solve;
mod train;

#[derive(Debug, Parser)]
#[command(name = "qcbf", version, about = "Robust Q-CBF certificates, safety filters and adversarial training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory [default: config `output_dir`, else ./out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core. Never changes results.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the Isaacs equation on the configured grid.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Safe-set areas and containment for V, the barrier baselines and an optional critic.
    Sets {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: PathBuf,
        /// Checkpoint whose critic is tabulated alongside.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Closed-loop rollouts for every configured filter and disturbance mode.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Value field for grid certificates and grid best responses.
        #[arg(long)]
        field: Option<PathBuf>,
        /// Training checkpoint for neural certificates.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Checkpoint holding the disturbance network for `best-response-neural`.
        #[arg(long)]
        dstb: Option<PathBuf>,
    },
    /// Adversarial critic/actor training, one run per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Value field used to log sign agreement at every checkpoint.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Best-response disturbance against a library of frozen controllers.
    TrainBr {
        #[command(flatten)]
        common: Common,
        /// Checkpoints whose controller networks form the library.
        #[arg(long, required = true, num_args = 1..)]
        library: Vec<PathBuf>,
        /// Checkpoint whose critic scores the disturbance.
        #[arg(long)]
        critic: PathBuf,
    },
    /// Compare a checkpoint critic with a grid value field.
    EvalCritic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        field: PathBuf,
        /// Disturbance checkpoint for the local-optimality probe and argmin match.
        #[arg(long)]
        dstb: Option<PathBuf>,
        /// Controller checkpoints whose rollouts supply `(x, u)` pairs [default: --checkpoint].
        #[arg(long, num_args = 1..)]
        library: Vec<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Solve { common }
            | Command::Sets { common, .. }
            | Command::Rollout { common, .. }
            | Command::Train { common, .. }
            | Command::TrainBr { common, .. }
            | Command::EvalCritic { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Solve { .. } => "solve",
            Command::Sets { .. } => "sets",
            Command::Rollout { .. } => "rollout",
            Command::Train { .. } => "train",
            Command::TrainBr { .. } => "train-br",
            Command::EvalCritic { .. } => "eval-critic",
        }
    }
}

/// Resolved configuration and output location shared by all commands.
pub struct Context {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Context {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> AppResult<PathBuf> {
        let path = self.path(name);
        write_json(&path, value)?;
        Ok(path)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::Input(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(AppError::io(path))
}

pub(crate) fn csv_writer(path: &Path) -> AppResult<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    }
    csv::Writer::from_path(path).map_err(|e| AppError::Input(format!("{}: {e}", path.display())))
}

pub(crate) fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AppError + '_ {
    move |e| AppError::Input(format!("{}: {e}", path.display()))
}

/// Loads the config, applies overrides and echoes the resolved config and
/// its hash into the output directory.
pub fn prepare(common: &Common) -> AppResult<Context> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = common.out.clone().or_else(|| config.output_dir.clone().map(PathBuf::from)).unwrap_or_else(|| "out".into());
    fs::create_dir_all(&out).map_err(AppError::io(&out))?;
    let hash = config.hash();
    let resolved = out.join("config.resolved.json");
    fs::write(&resolved, config.resolved_json()).map_err(AppError::io(&resolved))?;
    let hash_path = out.join("config.sha256");
    fs::write(&hash_path, format!("{hash}\n")).map_err(AppError::io(&hash_path))?;
    Ok(Context { config, hash, out })
}

#[derive(Serialize)]
struct Timing<'a> {
    command: &'a str,
    threads: usize,
    wall_time_s: f64,
}

pub fn run(cli: &Cli) -> AppResult<()> {
    let common = cli.command.common();
    let ctx = prepare(common)?;
    let pool = thread_pool(common.threads);
    let start = Instant::now();
    let result = pool.install(|| match &cli.command {
        Command::Solve { .. } => solve::run(&ctx),
        Command::Sets { field, checkpoint, .. } => sets::run(&ctx, field, checkpoint.as_deref()),
        Command::Rollout { field, checkpoint, dstb, .. } => {
            rollout::run(&ctx, field.as_deref(), checkpoint.as_deref(), dstb.as_deref())
        }
        Command::Train { field, .. } => train::run(&ctx, field.as_deref()),
        Command::TrainBr { library, critic, .. } => train::run_best_response(&ctx, library, critic),
        Command::EvalCritic { checkpoint, field, dstb, library, .. } => {
            eval::run(&ctx, checkpoint, field, dstb.as_deref(), library)
        }
    });
    let name = cli.command.name();
    let timing = Timing { command: name, threads: pool.current_num_threads(), wall_time_s: start.elapsed().as_secs_f64() };
    ctx.write_json(&format!("timing-{name}.json"), &timing)?;
    result
}
