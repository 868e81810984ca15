//! JSON configuration: loading, scalar overrides and hypothesis checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hypoheat::geometry::{check_hypotheses, VectorFieldPair};
use hypoheat::oracle::{OracleError, SimConfig};
use hypoheat::{ExprError, Vec2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid JSON at byte {offset} (line {line}, column {column}): {message}")]
    Json {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("cannot parse {field}: {source}")]
    Expr { field: &'static str, source: ExprError },
    #[error("hypothesis (a) fails at {point:?}: X0 is not parallel to X1 (residual {residual:e})")]
    NotParallel { point: [f64; 2], residual: f64 },
    #[error("hypothesis (b) fails at {point:?}: X1 and [X0, X1] do not span the plane (det {det:e})")]
    NotBracketGenerating { point: [f64; 2], det: f64 },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Finite-difference grid; `dt` defaults to the stability limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdConfig {
    pub bounds: [f64; 4],
    pub nx1: usize,
    pub nx2: usize,
    #[serde(default)]
    pub dt: Option<f64>,
}

fn default_window() -> [f64; 2] {
    [0.05, 0.4]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub x0_expr: [String; 2],
    pub x1_expr: [String; 2],
    pub base_point: [f64; 2],
    pub sim: SimConfig,
    pub fd: FdConfig,
    #[serde(default = "default_window")]
    pub fit_window: [f64; 2],
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Replaces table entries of `verify convolutions`, keyed `lhs_op|rhs_op`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub expected_overrides: BTreeMap<String, f64>,
    /// Directory of the configuration file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn pair(&self) -> VectorFieldPair {
        // parsed once at load; cannot fail afterwards
        VectorFieldPair::parse(
            [&self.x0_expr[0], &self.x0_expr[1]],
            [&self.x1_expr[0], &self.x1_expr[1]],
        )
        .expect("expressions validated at load")
    }

    /// `output_dir`, resolved against the configuration's directory.
    pub fn output_path(&self) -> PathBuf {
        self.base_dir.join(&self.output_dir)
    }

    pub fn base(&self) -> Vec2 {
        Vec2::new(self.base_point[0], self.base_point[1])
    }

    /// Observation times of the simulation grid inside the fit window.
    pub fn fit_times(&self) -> Vec<f64> {
        let [lo, hi] = self.fit_window;
        self.sim.t_grid.iter().copied().filter(|t| (lo..=hi).contains(t)).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let parse = |field: &'static str, s: &str| hypoheat::Expr::parse(s).map(|_| ()).map_err(|source| ConfigError::Expr { field, source });
        parse("x0_expr[0]", &self.x0_expr[0])?;
        parse("x0_expr[1]", &self.x0_expr[1])?;
        parse("x1_expr[0]", &self.x1_expr[0])?;
        parse("x1_expr[1]", &self.x1_expr[1])?;
        if !self.base_point.iter().all(|v| v.is_finite()) {
            return Err(ConfigError::Invalid("base_point must be finite".into()));
        }
        self.sim.validate().map_err(|e| match e {
            OracleError::InvalidConfig(m) => ConfigError::Invalid(format!("sim: {m}")),
            other => ConfigError::Invalid(other.to_string()),
        })?;
        let [lo, hi] = self.fit_window;
        if !(lo > 0.0 && lo < hi) {
            return Err(ConfigError::Invalid("fit_window must satisfy 0 < lo < hi".into()));
        }
        if let Some(dt) = self.fd.dt {
            if !(dt > 0.0) {
                return Err(ConfigError::Invalid("fd.dt must be positive".into()));
            }
        }
        let pair = self.pair();
        let point = self.base_point;
        let h = check_hypotheses(&pair, self.base()).map_err(|e| ConfigError::Invalid(format!("hypothesis check: {e}")))?;
        if !h.parallel {
            return Err(ConfigError::NotParallel {
                point,
                residual: h.parallel_residual,
            });
        }
        if !h.hormander {
            return Err(ConfigError::NotBracketGenerating { point, det: h.frame_det });
        }
        Ok(())
    }
}

/// Byte offset of a 1-based `(line, column)` position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let cfg: Config = serde_json::from_str(text).map_err(|e| ConfigError::Json {
        offset: byte_offset(text, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and validates a configuration. A relative `output_dir` is taken
/// relative to the file's directory.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = parse_config(&text)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}
