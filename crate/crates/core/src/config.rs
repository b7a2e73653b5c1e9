//! JSON run configurations for the command-line tool.
//!
//! Relative paths are resolved against the directory of the config file. The
//! resolved config, with defaults filled in and absolute paths, is echoed
//! next to the outputs so that running it again reproduces them.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::basis::{midpoint_grid, BasisFamily, ModelSpec};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::selection::{PenaltyMode, DEFAULT_THETA};
use crate::simlab::{Noise, ProcessKind};

pub const SCHEMA_VERSION: u32 = 1;

/// A model given either as a prefix size or as explicit basis indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
}

impl ModelEntry {
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let spec = match (&self.size, &self.indices) {
            (Some(m), None) => ModelSpec::prefix(*m),
            (None, Some(idx)) => ModelSpec::new(
                format!("idx{}", idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("-")),
                idx.clone(),
            ),
            _ => {
                return Err(Error::invalid(
                    "each model needs exactly one of `size` or `indices`",
                ))
            }
        };
        Ok(match &self.model_id {
            Some(id) => ModelSpec::new(id.clone(), spec.indices),
            None => spec,
        })
    }
}

pub fn model_specs(entries: &[ModelEntry]) -> Result<Vec<ModelSpec>> {
    if entries.is_empty() {
        return Err(Error::invalid("empty model list"));
    }
    let specs = entries.iter().map(ModelEntry::to_spec).collect::<Result<Vec<_>>>()?;
    let mut seen = BTreeSet::new();
    for s in &specs {
        if !seen.insert(s.model_id.as_str()) {
            return Err(Error::invalid(format!("duplicate model_id {:?}", s.model_id)));
        }
    }
    Ok(specs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub schema_version: u32,
    pub data: PathBuf,
    pub points: PathBuf,
    pub basis: BasisFamily,
    pub model: ModelEntry,
    #[serde(default)]
    pub center: bool,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
}

fn default_theta() -> f64 {
    DEFAULT_THETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    pub schema_version: u32,
    pub data: PathBuf,
    pub points: PathBuf,
    pub basis: BasisFamily,
    pub models: Vec<ModelEntry>,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub penalty_mode: PenaltyMode,
    #[serde(default)]
    pub center: bool,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub schema_version: u32,
    /// A `result.json` written by `estimate` or `select`.
    pub result: PathBuf,
    pub pairs: PathBuf,
    pub output: PathBuf,
}

/// Design points of a simulated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PointsSpec {
    /// `n` cell midpoints of the basis domain.
    Midpoint { n: usize },
    Explicit { values: Vec<f64> },
}

impl PointsSpec {
    pub fn resolve(&self, family: &BasisFamily) -> Result<Vec<f64>> {
        match self {
            PointsSpec::Midpoint { n } if *n == 0 => Err(Error::invalid("need at least one point")),
            PointsSpec::Midpoint { n } => Ok(midpoint_grid(family, *n)),
            PointsSpec::Explicit { values } if values.is_empty() => {
                Err(Error::invalid("need at least one point"))
            }
            PointsSpec::Explicit { values } => Ok(values.clone()),
        }
    }
}

/// The non-negative matrix `Ã` of a tail experiment on `ℝ^{Nd}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ATildeSpec {
    /// `e_k e_kᵀ` for a 1-based coordinate `k`.
    Coordinate { index: usize },
    /// `(1/N) 1 1ᵀ ⊗ diag(1, …, 1, 0, …, 0)` with `dims` ones.
    BlockMean { dims: usize },
    Identity,
}

impl ATildeSpec {
    pub fn build(&self, n_blocks: usize, d: usize) -> Result<SymMatrix> {
        let nd = n_blocks * d;
        match self {
            ATildeSpec::Coordinate { index } => {
                if *index == 0 || *index > nd {
                    return Err(Error::invalid(format!("coordinate {index} outside 1..={nd}")));
                }
                let mut diag = vec![0.0; nd];
                diag[index - 1] = 1.0;
                Ok(SymMatrix::from_diagonal(&diag))
            }
            ATildeSpec::BlockMean { dims } => {
                if *dims == 0 || *dims > d {
                    return Err(Error::invalid(format!("dims {dims} outside 1..={d}")));
                }
                let mean = nalgebra::DMatrix::from_element(n_blocks, n_blocks, 1.0 / n_blocks as f64);
                let sel = nalgebra::DMatrix::from_fn(d, d, |i, j| if i == j && i < *dims { 1.0 } else { 0.0 });
                SymMatrix::symmetrize(crate::linalg::kron(&mean, &sel))
            }
            ATildeSpec::Identity => Ok(SymMatrix::identity(nd)),
        }
    }
}

fn default_tolerance() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentConfig {
    RiskDecomposition {
        process: ProcessKind,
        points: PointsSpec,
        basis: BasisFamily,
        sizes: Vec<usize>,
        n_samples: usize,
        replications: usize,
        /// Sample size of the entrywise check of the analytic `Φ`; skipped when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phi_check_samples: Option<usize>,
    },
    Oracle {
        process: ProcessKind,
        points: PointsSpec,
        basis: BasisFamily,
        sizes: Vec<usize>,
        thetas: Vec<f64>,
        n_samples: usize,
        replications: usize,
    },
    Rate {
        process: ProcessKind,
        points: PointsSpec,
        basis: BasisFamily,
        sizes: Vec<Vec<usize>>,
        ns: Vec<usize>,
        replications: usize,
        #[serde(default = "default_theta")]
        theta: f64,
        /// Defaults to `−2α/(2α+1)` for KL processes.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_slope: Option<f64>,
        #[serde(default = "default_tolerance")]
        tolerance: f64,
        /// Assertions are skipped; the report is still written.
        #[serde(default)]
        smoke: bool,
    },
    Concentration {
        phi: Vec<Vec<f64>>,
        n_blocks: usize,
        a_tilde: ATildeSpec,
        noise: Noise,
        p: f64,
        replications: usize,
        xs: Vec<f64>,
    },
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::RiskDecomposition { .. } => "risk_decomposition",
            ExperimentConfig::Oracle { .. } => "oracle",
            ExperimentConfig::Rate { .. } => "rate",
            ExperimentConfig::Concentration { .. } => "concentration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub experiment: ExperimentConfig,
}

/// Reads and parses a config, rejecting unknown fields and schema versions.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Parse(format!(
                "{}: unsupported schema_version {v} (expected {SCHEMA_VERSION})",
                path.display()
            )))
        }
        None => {
            return Err(Error::Parse(format!(
                "{}: missing schema_version",
                path.display()
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// `path` if absolute, otherwise `base/path`.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Directory against which a config's relative paths are resolved.
pub fn base_dir(config_path: &Path) -> Result<PathBuf> {
    let parent = config_path.parent().unwrap_or(Path::new("."));
    let parent = if parent.as_os_str().is_empty() {
        Path::new(".")
    } else {
        parent
    };
    Ok(std::path::absolute(parent)?)
}
