//! JSON config files of `train` and `eval`. Relative data paths resolve
//! against the config file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dashfp::backbone::BackboneConfig;
use dashfp::baselines::CeConfig;
use dashfp::evalx::{Method, ModelConfig};
use dashfp::metriclearn::TrainConfig;
use dashfp::synthgen::{BenchmarkSpec, TargetSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid config", path.display()))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new("")).join(p)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainKind {
    #[default]
    Triplet,
    Ce,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub train_data: PathBuf,
    /// OOD pool for outlier leveraging.
    #[serde(default)]
    pub tune_data: Option<PathBuf>,
    #[serde(default)]
    pub model: TrainKind,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ce: CeConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub tune: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPaths {
    pub target: PathBuf,
    pub out: PathBuf,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Triplet, Method::Ce, Method::Knn]
}

fn default_runs() -> usize {
    1
}

fn default_leave_out_fraction() -> f64 {
    0.1
}

fn default_leave_out_shots() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

fn default_transfer_shots() -> Vec<usize> {
    vec![0, 1, 3]
}

/// Exactly one of `benchmark` and `data` names the source datasets. For
/// the transfer protocol a synthetic `benchmark` pairs with `target`, file
/// `data` with `target_data`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    #[serde(default)]
    pub benchmark: Option<BenchmarkSpec>,
    #[serde(default)]
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub models: ModelConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Runs use seeds `seed, seed + 1, …`.
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_leave_out_fraction")]
    pub leave_out_fraction: f64,
    #[serde(default = "default_leave_out_shots")]
    pub leave_out_shots: Vec<usize>,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub target_data: Option<TargetPaths>,
    #[serde(default = "default_transfer_shots")]
    pub transfer_shots: Vec<usize>,
}

impl EvalFile {
    pub fn validate(&self) -> Result<()> {
        match (&self.benchmark, &self.data) {
            (Some(_), Some(_)) => bail!("invalid config: benchmark: conflicts with data"),
            (None, None) => bail!("invalid config: benchmark: one of benchmark or data is required"),
            _ => {}
        }
        if self.runs == 0 {
            bail!("invalid config: runs: must be at least 1");
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed + i).collect()
    }
}
