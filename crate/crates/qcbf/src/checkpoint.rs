//! Network checkpoints: a JSON header naming each network's architecture and
//! its slice of a little-endian `f64` parameter blob.
//!
//! A header may instead (or additionally) name a tabulated critic built from a
//! value field, used to check the evaluation path against the grid solution.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use qcbf_core::learn::{Agents, Checkpoint, Mlp, MlpSpec, QLift};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::field_io::{f64s_to_le, le_to_f64s};

pub const CHECKPOINT_FORMAT: &str = "qcbf-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkEntry {
    pub spec: MlpSpec,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableCritic {
    /// Field file, relative to the checkpoint header.
    pub field: String,
    pub lift: QLift,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub seed: u64,
    pub gamma_env: f64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<String>,
    #[serde(default)]
    pub networks: BTreeMap<String, NetworkEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_table: Option<TableCritic>,
}

/// A checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub path: PathBuf,
    pub header: CheckpointHeader,
    pub networks: BTreeMap<String, Mlp>,
}

impl LoadedCheckpoint {
    pub fn network(&self, name: &str) -> AppResult<&Mlp> {
        self.networks
            .get(name)
            .ok_or_else(|| AppError::Input(format!("{}: checkpoint has no '{name}' network", self.path.display())))
    }

    /// Path of the tabulated critic's field, resolved against the header.
    pub fn table_field_path(&self) -> Option<PathBuf> {
        let t = self.header.critic_table.as_ref()?;
        Some(self.path.parent().unwrap_or(Path::new(".")).join(&t.field))
    }
}

pub fn header_for(step: u64, seed: u64, gamma_env: f64, config_hash: &str) -> CheckpointHeader {
    CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        step,
        seed,
        gamma_env,
        config_hash: config_hash.into(),
        blob: None,
        networks: BTreeMap::new(),
        critic_table: None,
    }
}

/// Writes `header` with `nets` to `path` and the parameter blob next to it.
pub fn write_checkpoint(path: &Path, mut header: CheckpointHeader, nets: &[(&str, &Mlp)]) -> AppResult<()> {
    header.networks.clear();
    let mut blob: Vec<f64> = Vec::new();
    for (name, net) in nets {
        header
            .networks
            .insert((*name).into(), NetworkEntry { spec: net.spec().clone(), offset: blob.len(), len: net.param_count() });
        blob.extend_from_slice(net.params());
    }
    if !nets.is_empty() {
        let bin = path.with_extension("bin");
        fs::write(&bin, f64s_to_le(&blob)).map_err(AppError::io(&bin))?;
        header.blob = Some(bin.file_name().unwrap().to_string_lossy().into_owned());
    } else {
        header.blob = None;
    }
    let mut text = serde_json::to_string_pretty(&header).expect("checkpoint header serializes");
    text.push('\n');
    fs::write(path, text).map_err(AppError::io(path))
}

/// Writes all four training networks.
pub fn write_agents(path: &Path, ck: &Checkpoint, config_hash: &str) -> AppResult<()> {
    let a: &Agents = &ck.agents;
    write_checkpoint(
        path,
        header_for(ck.step, ck.seed, ck.gamma_env, config_hash),
        &[("critic", &a.critic), ("ctrl", &a.ctrl), ("dstb", &a.dstb), ("target", &a.target)],
    )
}

pub fn read_checkpoint(path: &Path) -> AppResult<LoadedCheckpoint> {
    let text = fs::read_to_string(path).map_err(AppError::io(path))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| {
        AppError::Input(format!("{}:{}:{}: malformed checkpoint: {e}", path.display(), e.line(), e.column()))
    })?;
    let bad = |msg: String| AppError::Input(format!("{}: {msg}", path.display()));
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(bad(format!("unsupported checkpoint format {} v{}", header.format, header.version)));
    }
    let blob = match &header.blob {
        Some(name) => {
            let bin = path.parent().unwrap_or(Path::new(".")).join(name);
            let bytes = fs::read(&bin).map_err(AppError::io(&bin))?;
            le_to_f64s(&bytes).ok_or_else(|| bad(format!("{} is not a whole number of f64", bin.display())))?
        }
        None if header.networks.is_empty() => Vec::new(),
        None => return Err(bad("networks listed without a parameter blob".into())),
    };
    let mut networks = BTreeMap::new();
    for (name, e) in &header.networks {
        let end = e.offset.checked_add(e.len).filter(|end| *end <= blob.len());
        let end = end.ok_or_else(|| bad(format!("network '{name}' lies outside the blob")))?;
        let net = Mlp::from_parts(e.spec.clone(), blob[e.offset..end].to_vec()).map_err(|err| bad(format!("network '{name}': {err}")))?;
        networks.insert(name.clone(), net);
    }
    if header.networks.is_empty() && header.critic_table.is_none() {
        return Err(bad("checkpoint holds neither networks nor a critic table".into()));
    }
    Ok(LoadedCheckpoint { path: path.to_path_buf(), header, networks })
}
