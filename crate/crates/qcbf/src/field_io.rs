//! On-disk format for [`ScalarField`].
//!
//! A JSON header carries the grid, label, solver parameters and a creation
//! timestamp. Values are stored inline as a JSON array when the grid has at
//! most [`INLINE_LIMIT`] nodes, otherwise in a sibling `.bin` file of
//! little-endian `f64` in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use qcbf_core::{Axis, FieldMeta, Grid, ScalarField};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const INLINE_LIMIT: usize = 65_536;
pub const FIELD_FORMAT: &str = "qcbf-field";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    Inline,
    F64Le,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHeader {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub axes: Vec<Axis>,
    pub label: String,
    pub params: BTreeMap<String, String>,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub encoding: Encoding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

/// `SOURCE_DATE_EPOCH` when set, else the wall clock.
pub fn creation_time() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()) {
        return t;
    }
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn f64s_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_f64s(bytes: &[u8]) -> Option<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Path of the binary companion of a header at `path`.
pub fn data_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

pub fn write_field(path: &Path, field: &ScalarField) -> AppResult<()> {
    write_field_with(path, field, INLINE_LIMIT)
}

/// Like [`write_field`] with an explicit inline threshold.
pub fn write_field_with(path: &Path, field: &ScalarField, inline_limit: usize) -> AppResult<()> {
    let values = field.values();
    let inline = values.len() <= inline_limit;
    let mut header = FieldHeader {
        format: FIELD_FORMAT.into(),
        version: 1,
        dim: field.grid().dim(),
        axes: field.grid().axes().to_vec(),
        label: field.meta.label.clone(),
        params: field.meta.params.clone(),
        created: creation_time(),
        encoding: if inline { Encoding::Inline } else { Encoding::F64Le },
        data: None,
        values: None,
    };
    if inline {
        header.values = Some(values.to_vec());
    } else {
        let bin = data_path(path);
        fs::write(&bin, f64s_to_le(values)).map_err(AppError::io(&bin))?;
        header.data = Some(bin.file_name().unwrap().to_string_lossy().into_owned());
    }
    let mut text = serde_json::to_string_pretty(&header).expect("field header serializes");
    text.push('\n');
    fs::write(path, text).map_err(AppError::io(path))
}

pub fn read_field(path: &Path) -> AppResult<ScalarField> {
    let text = fs::read_to_string(path).map_err(AppError::io(path))?;
    let header: FieldHeader = serde_json::from_str(&text).map_err(|e| {
        AppError::Input(format!("{}:{}:{}: malformed field file: {e}", path.display(), e.line(), e.column()))
    })?;
    let bad = |msg: String| AppError::Input(format!("{}: {msg}", path.display()));
    if header.format != FIELD_FORMAT || header.version != 1 {
        return Err(bad(format!("unsupported field format {} v{}", header.format, header.version)));
    }
    if header.dim != header.axes.len() {
        return Err(bad(format!("dim {} does not match {} axes", header.dim, header.axes.len())));
    }
    let grid = Grid::new(header.axes).map_err(|e| bad(e.to_string()))?;
    let values = match (header.encoding, header.values, header.data) {
        (Encoding::Inline, Some(v), None) => v,
        (Encoding::F64Le, None, Some(name)) => {
            let bin = path.parent().unwrap_or(Path::new(".")).join(name);
            let bytes = fs::read(&bin).map_err(AppError::io(&bin))?;
            le_to_f64s(&bytes).ok_or_else(|| bad(format!("{} is not a whole number of f64", bin.display())))?
        }
        _ => return Err(bad("encoding does not match the stored values".into())),
    };
    ScalarField::new(grid, values, FieldMeta { label: header.label, params: header.params }).map_err(|e| bad(e.to_string()))
}
