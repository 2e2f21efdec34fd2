//! Experiment configuration: one JSON file drives every command.

use std::f64::consts::FRAC_PI_3;
use std::path::Path;

use qcbf_core::filters::PdGains;
use qcbf_core::learn::{BestResponseConfig, TrainConfig};
use qcbf_core::{Alpha, Axis, ClassKMap, Grid, PendulumConfig, SolveConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    /// Used when `--out` is not given.
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub system: PendulumConfig,
    #[serde(default = "canonical_grid")]
    pub grid: Grid,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub best_response: BestResponseConfig,
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub sets: SetsConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// 161 x 161 nodes over `theta in [-1.2, 1.2]`, `omega in [-8, 8]`.
pub fn canonical_grid() -> Grid {
    Grid::new(vec![Axis { min: -1.2, max: 1.2, count: 161 }, Axis { min: -8.0, max: 8.0, count: 161 }])
        .expect("canonical grid is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    Qcbf,
    Lrsf,
    CtAna,
    CtHeu,
    None,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Qcbf => "qcbf",
            FilterKind::Lrsf => "lrsf",
            FilterKind::CtAna => "ct-ana",
            FilterKind::CtHeu => "ct-heu",
            FilterKind::None => "none",
        }
    }
}

/// Which artifact certifies the Q-CBF and least-restrictive filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertificateSource {
    Grid,
    Neural,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(rename = "type")]
    pub kind: FilterKind,
    pub certificate: CertificateSource,
    pub beta: ClassKMap,
    /// Decay rate of the continuous-time barrier baselines.
    pub alpha: Alpha,
    /// Task controller.
    pub gains: PdGains,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            kind: FilterKind::Qcbf,
            certificate: CertificateSource::Grid,
            beta: ClassKMap::default(),
            alpha: Alpha::default(),
            gains: PdGains::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceMode {
    BestResponseGrid,
    BestResponseNeural,
    Zero,
    Random,
}

impl DisturbanceMode {
    pub fn name(self) -> &'static str {
        match self {
            DisturbanceMode::BestResponseGrid => "best-response-grid",
            DisturbanceMode::BestResponseNeural => "best-response-neural",
            DisturbanceMode::Zero => "zero",
            DisturbanceMode::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub n: usize,
    /// Initial states satisfy `0 <= W(x) <= band` for the filter's own certificate `W`.
    pub band: f64,
    pub horizon: u64,
    /// Filters to run; empty means `filter.type`.
    pub filters: Vec<FilterKind>,
    pub disturbances: Vec<DisturbanceMode>,
    /// Fixed initial state for every rollout instead of boundary sampling.
    pub x0: Option<Vec<f64>>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            n: 20,
            band: 0.02 * FRAC_PI_3,
            horizon: 500,
            filters: Vec::new(),
            disturbances: vec![DisturbanceMode::BestResponseGrid],
            x0: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetsConfig {
    /// Off-node samples used to measure the interpolation error bound.
    pub residual_samples: usize,
    /// Node stride of the coarse grid on which a neural value is tabulated.
    pub neural_stride: usize,
}

impl Default for SetsConfig {
    fn default() -> Self {
        Self { residual_samples: 10_000, neural_stride: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub stride: usize,
    /// Nodes with `|V| <= min_abs` are left out of the sign agreement.
    pub min_abs: f64,
    pub probe_radii: Vec<f64>,
    pub probe_samples: usize,
    pub probe_perturbations: usize,
    pub probe_delta: f64,
    /// `(x, u)` pairs from library rollouts used for the argmin match rate.
    pub match_pairs: usize,
    pub match_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            min_abs: 0.05,
            probe_radii: vec![1e-3, 1e-2, 1e-1],
            probe_samples: 256,
            probe_perturbations: 64,
            probe_delta: 1e-4,
            match_pairs: 1000,
            match_tolerance: 1e-4,
        }
    }
}

/// Line of the first `"key":` in `text`, for anchoring semantic errors.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let pat = format!("\"{key}\"");
    let mut from = 0;
    while let Some(i) = text[from..].find(&pat) {
        let at = from + i;
        let rest = text[at + pat.len()..].trim_start();
        if rest.starts_with(':') {
            return Some(text[..at].matches('\n').count() + 1);
        }
        from = at + pat.len();
    }
    None
}

impl ExperimentConfig {
    /// Parses and validates `text`; errors name `origin` and a line.
    pub fn parse(text: &str, origin: &str) -> AppResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| AppError::Input(format!("{origin}:{}:{}: {e}", e.line(), e.column())))?;
        cfg.validate().map_err(|(section, msg)| {
            let line = key_line(text, section).unwrap_or(1);
            AppError::Input(format!("{origin}:{line}: [{section}] {msg}"))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(AppError::io(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Semantic checks; the error names the offending section.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.schema != SCHEMA_VERSION {
            return Err(("schema", format!("unsupported schema {}, expected {SCHEMA_VERSION}", self.schema)));
        }
        self.system.validate().map_err(|e| ("system", e.to_string()))?;
        if self.grid.dim() != 2 {
            return Err(("grid", format!("the pendulum needs a 2-D grid, got {}", self.grid.dim())));
        }
        self.solve.validate().map_err(|e| ("solve", e.to_string()))?;
        self.filter.beta.validate().map_err(|e| ("filter", e.to_string()))?;
        Alpha::new(self.filter.alpha.rate).map_err(|e| ("filter", e.to_string()))?;
        let g = self.filter.gains;
        if !(g.kp.is_finite() && g.kd.is_finite()) {
            return Err(("filter", "gains must be finite".into()));
        }
        self.train.validate().map_err(|e| ("train", e.to_string()))?;
        if self.train.runs == 0 {
            return Err(("train", "runs must be at least 1".into()));
        }
        if self.train.reset_lower.len() != 2 {
            return Err(("train", "reset box must be 2-D".into()));
        }
        self.best_response.validate().map_err(|e| ("best_response", e.to_string()))?;
        if self.best_response.reset_lower.len() != 2 {
            return Err(("best_response", "reset box must be 2-D".into()));
        }
        let r = &self.rollout;
        if !(r.band.is_finite() && r.band >= 0.0) {
            return Err(("rollout", format!("band must be non-negative, got {}", r.band)));
        }
        if r.disturbances.is_empty() {
            return Err(("rollout", "disturbances must name at least one mode".into()));
        }
        if let Some(x0) = &r.x0 {
            if x0.len() != 2 || x0.iter().any(|v| !v.is_finite()) {
                return Err(("rollout", "x0 must be a finite 2-D state".into()));
            }
        }
        if self.sets.neural_stride == 0 {
            return Err(("sets", "neural_stride must be at least 1".into()));
        }
        let e = &self.eval;
        if e.stride == 0 || !(e.min_abs >= 0.0) || !(e.probe_delta >= 0.0) || !(e.match_tolerance >= 0.0) {
            return Err(("eval", "need stride >= 1 and non-negative thresholds".into()));
        }
        if e.probe_radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(("eval", "probe radii must be non-negative".into()));
        }
        Ok(())
    }

    /// Filters run by the rollout command.
    pub fn rollout_filters(&self) -> Vec<FilterKind> {
        if self.rollout.filters.is_empty() {
            vec![self.filter.kind]
        } else {
            self.rollout.filters.clone()
        }
    }

    /// Pretty JSON with every default filled in.
    pub fn resolved_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the resolved config, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.resolved_json().as_bytes()))
    }
}
