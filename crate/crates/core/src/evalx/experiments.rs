use serde::{Deserialize, Serialize};

use super::protocols::{robustness_eval, split_target_shots, transfer_eval, GalleryClassifier};
use super::{aggregate_runs, MetricsReport, RunMetrics};
use crate::backbone::{BackboneConfig, EmbeddingModel};
use crate::baselines::{ce_train, knn_fit, CeConfig};
use crate::error::{Error, Result};
use crate::flowio::Dataset;
use crate::gallery::build_gallery;
use crate::metriclearn::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Triplet,
    /// Triplet training with outlier leveraging on the tune set.
    TripletOl,
    Ce,
    Knn,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Triplet => "triplet",
            Method::TripletOl => "triplet_ol",
            Method::Ce => "ce",
            Method::Knn => "knn",
        }
    }
}

/// Settings shared by every method of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub ce: CeConfig,
    pub k_candidates: Vec<usize>,
    pub cv_folds: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            ce: CeConfig::default(),
            k_candidates: crate::baselines::DEFAULT_K_CANDIDATES.to_vec(),
            cv_folds: 5,
        }
    }
}

impl ModelConfig {
    /// Trains a triplet model with every random choice derived from `seed`.
    pub fn train_triplet(&self, train_ds: &Dataset, tune: Option<&Dataset>, use_ol: bool, seed: u64) -> Result<EmbeddingModel<f32>> {
        let model = EmbeddingModel::<f32>::new(self.backbone.clone(), seed)?;
        let cfg = TrainConfig {
            seed,
            use_ol,
            ..self.train.clone()
        };
        Ok(train(model, train_ds, &cfg, tune)?.model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub report: MetricsReport,
}

/// Accuracy, AP and recall at full precision of each method, one run per seed.
pub fn robustness_experiment(
    train_ds: &Dataset,
    test_ds: &Dataset,
    tune_ds: Option<&Dataset>,
    out_ds: &Dataset,
    methods: &[Method],
    cfg: &ModelConfig,
    seeds: &[u64],
) -> Result<Vec<MethodReport>> {
    if methods.is_empty() {
        return Err(Error::config("methods", "must not be empty"));
    }
    let mut runs: Vec<Vec<RunMetrics>> = vec![Vec::new(); methods.len()];
    for &seed in seeds {
        for (m, &method) in methods.iter().enumerate() {
            let r = match method {
                Method::Triplet | Method::TripletOl => {
                    let model = cfg.train_triplet(train_ds, tune_ds, method == Method::TripletOl, seed)?;
                    let g = build_gallery(&model, train_ds)?;
                    robustness_eval(&GalleryClassifier { model: &model, gallery: &g }, test_ds, out_ds)?
                }
                Method::Ce => {
                    let ce = ce_train::<f32>(train_ds, &cfg.backbone, &CeConfig { seed, ..cfg.ce.clone() })?;
                    robustness_eval(&ce.classifier, test_ds, out_ds)?
                }
                Method::Knn => {
                    let knn = knn_fit(train_ds, &cfg.k_candidates, cfg.cv_folds, seed)?;
                    robustness_eval(&knn, test_ds, out_ds)?
                }
            };
            log::info!("seed {seed} {}: {r:?}", method.as_str());
            runs[m].push(r);
        }
    }
    methods
        .iter()
        .zip(&runs)
        .map(|(&method, r)| {
            Ok(MethodReport {
                method,
                report: aggregate_runs(r, seeds)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotReport {
    pub shots: usize,
    pub report: MetricsReport,
}

/// Per seed: trains a source model, then scores the target domain with
/// source centroids (0 shots) and with centroids rebuilt from target shots.
pub fn transfer_experiment(
    source_train: &Dataset,
    target_ds: &Dataset,
    target_out: &Dataset,
    shots: &[usize],
    cfg: &ModelConfig,
    seeds: &[u64],
) -> Result<Vec<ShotReport>> {
    let max_shots = shots.iter().copied().max().ok_or_else(|| Error::config("shots", "must not be empty"))?;
    let mut runs: Vec<Vec<RunMetrics>> = vec![Vec::new(); shots.len()];
    for &seed in seeds {
        let model = cfg.train_triplet(source_train, None, false, seed)?;
        let g = build_gallery(&model, source_train)?;
        let split = split_target_shots(target_ds, max_shots, seed)?;
        for (j, &n) in shots.iter().enumerate() {
            runs[j].push(transfer_eval(&model, &g, &split, target_out, n)?);
        }
    }
    shots
        .iter()
        .zip(&runs)
        .map(|(&shots, r)| {
            Ok(ShotReport {
                shots,
                report: aggregate_runs(r, seeds)?,
            })
        })
        .collect()
}
