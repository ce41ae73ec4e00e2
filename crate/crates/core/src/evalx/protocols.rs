use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{aggregate_runs, average_precision, recall_at_full_precision, MeanStd, MetricsReport, RankedDetection, RunMetrics};
use crate::backbone::{BackboneConfig, EmbeddingModel};
use crate::baselines::{flat_features, CeClassifier, KnnModel};
use crate::error::{Error, Result};
use crate::flowio::Dataset;
use crate::gallery::{build_gallery, replace_centroids, Gallery};
use crate::metriclearn::{train, TrainConfig};
use crate::nn::Scalar;

/// Anything that maps streams to `(class index, confidence)` over a fixed
/// list of classes.
pub trait Classifier {
    fn class_ids(&self) -> &[String];
    fn classify(&self, ds: &Dataset) -> Result<Vec<(usize, f64)>>;
}

/// Nearest-centroid inference with a trained embedding model.
pub struct GalleryClassifier<'a, T> {
    pub model: &'a EmbeddingModel<T>,
    pub gallery: &'a Gallery,
}

fn classify_embeddings(gallery: &Gallery, emb: &Array2<f64>) -> Result<Vec<(usize, f64)>> {
    emb.rows().into_iter().map(|r| gallery.classify(r)).collect()
}

impl<T: Scalar> Classifier for GalleryClassifier<'_, T> {
    fn class_ids(&self) -> &[String] {
        self.gallery.class_ids()
    }

    fn classify(&self, ds: &Dataset) -> Result<Vec<(usize, f64)>> {
        let emb = self.model.embed_dataset(ds)?.mapv(|v| v.as_f64());
        classify_embeddings(self.gallery, &emb)
    }
}

impl<T: Scalar> Classifier for CeClassifier<T> {
    fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    fn classify(&self, ds: &Dataset) -> Result<Vec<(usize, f64)>> {
        let p = self.score_dataset(ds)?;
        Ok(p.rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (k, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = k;
                    }
                }
                (best, r[best])
            })
            .collect())
    }
}

impl Classifier for KnnModel {
    fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    fn classify(&self, ds: &Dataset) -> Result<Vec<(usize, f64)>> {
        self.predict_batch(&flat_features(ds))
    }
}

/// Class index of every sample of `ds` in `class_ids`, `None` when absent.
fn truth(class_ids: &[String], ds: &Dataset) -> Vec<Option<usize>> {
    let index: HashMap<&str, usize> = class_ids.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    ds.samples.iter().map(|s| index.get(s.video_id.as_str()).copied()).collect()
}

fn hits(pred: &[(usize, f64)], truth: &[Option<usize>]) -> Vec<bool> {
    pred.iter().zip(truth).map(|(p, t)| Some(p.0) == *t).collect()
}

fn ratio(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return f64::NAN;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Accuracy on `test_ds`, and AP and recall at full precision of separating
/// correctly classified test streams from `out_ds` by confidence.
/// Misclassified test streams take part in the accuracy only.
pub fn robustness_eval<C: Classifier + ?Sized>(clf: &C, test_ds: &Dataset, out_ds: &Dataset) -> Result<RunMetrics> {
    let classes: BTreeSet<&str> = clf.class_ids().iter().map(String::as_str).collect();
    if let Some(s) = out_ds.samples.iter().find(|s| classes.contains(s.video_id.as_str())) {
        return Err(Error::OodOverlap(s.video_id.clone()));
    }
    if test_ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pred = clf.classify(test_ds)?;
    let ok = hits(&pred, &truth(clf.class_ids(), test_ds));
    let mut detections: Vec<RankedDetection> = pred
        .iter()
        .zip(&ok)
        .filter(|(_, &h)| h)
        .map(|(p, _)| RankedDetection::new(p.1, true))
        .collect();
    detections.extend(clf.classify(out_ds)?.iter().map(|p| RankedDetection::new(p.1, false)));
    Ok(RunMetrics {
        accuracy: ratio(&ok),
        map: average_precision(&detections)?,
        recall_at_full_precision: recall_at_full_precision(&detections)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveOutConfig {
    pub leave_out_fraction: f64,
    pub shots: Vec<usize>,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotAccuracy {
    pub shots: usize,
    /// Accuracy on test streams of the classes the model was trained on.
    pub trained_accuracy: f64,
    /// Accuracy on test streams of the classes added with `shots` streams.
    pub nshot_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveOutRun {
    pub seed: u64,
    pub left_out: Vec<String>,
    pub per_shot: Vec<ShotAccuracy>,
}

/// `floor(fraction · K)` classes drawn with a seeded shuffle, sorted.
pub fn choose_left_out(class_ids: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("leave_out_fraction", "must be in (0, 1)"));
    }
    let n = (fraction * class_ids.len() as f64).floor() as usize;
    if n == 0 || n + 2 > class_ids.len() {
        return Err(Error::config(
            "leave_out_fraction",
            format!("leaves {n} of {} classes out", class_ids.len()),
        ));
    }
    let mut ids = class_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = ids[..n].to_vec();
    out.sort();
    Ok(out)
}

/// Shot accuracies of a model trained without the `left_out` classes. Those
/// classes join the gallery with the first `n` streams of a seeded
/// permutation of their train streams, so larger `n` extend smaller ones.
pub fn evaluate_leave_out<T: Scalar>(
    model: &EmbeddingModel<T>,
    train_ds: &Dataset,
    test_ds: &Dataset,
    left_out: &[String],
    shots: &[usize],
    seed: u64,
) -> Result<Vec<ShotAccuracy>> {
    let out_set: BTreeSet<&str> = left_out.iter().map(String::as_str).collect();
    let kept = train_ds.filter(|s| !out_set.contains(s.video_id.as_str()));
    let base = build_gallery(model, &kept)?;

    let by_class = train_ds.indices_by_class();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = Vec::with_capacity(left_out.len());
    let max_shots = shots.iter().copied().max().unwrap_or(0);
    for id in left_out {
        let mut idx = by_class.get(id).cloned().unwrap_or_default();
        if idx.len() < max_shots {
            return Err(Error::InsufficientShots {
                video_id: id.clone(),
                requested: max_shots,
                available: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        idx.truncate(max_shots);
        let emb = model.embed_dataset(&train_ds.subset(&idx))?.mapv(|v| v.as_f64());
        pools.push(emb);
    }

    let test_emb = model.embed_dataset(test_ds)?.mapv(|v| v.as_f64());
    let is_left_out: Vec<bool> = test_ds.samples.iter().map(|s| out_set.contains(s.video_id.as_str())).collect();

    let mut result = Vec::with_capacity(shots.len());
    for &n in shots {
        if n == 0 {
            return Err(Error::config("shots", "must be at least 1"));
        }
        let mut g = base.clone();
        for (id, emb) in left_out.iter().zip(&pools) {
            g = g.with_class(id, emb.slice(ndarray::s![..n, ..]))?;
        }
        let ok = hits(&classify_embeddings(&g, &test_emb)?, &truth(g.class_ids(), test_ds));
        let split = |want: bool| -> Vec<bool> {
            ok.iter().zip(&is_left_out).filter(|(_, &l)| l == want).map(|(&h, _)| h).collect()
        };
        result.push(ShotAccuracy {
            shots: n,
            trained_accuracy: ratio(&split(false)),
            nshot_accuracy: ratio(&split(true)),
        });
    }
    Ok(result)
}

/// Per seed: leave classes out, train on the rest, then add the left-out
/// classes to the gallery with each shot count.
pub fn leave_out_protocol(train_ds: &Dataset, test_ds: &Dataset, cfg: &LeaveOutConfig, seeds: &[u64]) -> Result<Vec<LeaveOutRun>> {
    if cfg.shots.is_empty() {
        return Err(Error::config("shots", "must not be empty"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let left_out = choose_left_out(&train_ds.class_ids(), cfg.leave_out_fraction, seed)?;
        let out_set: BTreeSet<&str> = left_out.iter().map(String::as_str).collect();
        let kept = train_ds.filter(|s| !out_set.contains(s.video_id.as_str()));
        let model = EmbeddingModel::<f32>::new(cfg.backbone.clone(), seed)?;
        let tcfg = TrainConfig { seed, ..cfg.train.clone() };
        let model = train(model, &kept, &tcfg, None)?.model;
        let per_shot = evaluate_leave_out(&model, train_ds, test_ds, &left_out, &cfg.shots, seed)?;
        runs.push(LeaveOutRun { seed, left_out, per_shot });
    }
    Ok(runs)
}

/// Shot accuracies of several leave-out runs, averaged per shot count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveOutSummary {
    pub shots: usize,
    pub trained_accuracy: MeanStd,
    pub nshot_accuracy: MeanStd,
}

pub fn summarize_leave_out(runs: &[LeaveOutRun]) -> Result<Vec<LeaveOutSummary>> {
    let first = runs.first().ok_or(Error::EmptyDataset)?;
    first
        .per_shot
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let col = |f: fn(&ShotAccuracy) -> f64| -> Result<MeanStd> {
                let v = runs
                    .iter()
                    .map(|r| r.per_shot.get(j).filter(|x| x.shots == s.shots).map(f))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| Error::Invalid("leave-out runs use different shot counts".to_string()))?;
                MeanStd::of(&v)
            };
            Ok(LeaveOutSummary {
                shots: s.shots,
                trained_accuracy: col(|x| x.trained_accuracy)?,
                nshot_accuracy: col(|x| x.nshot_accuracy)?,
            })
        })
        .collect()
}

/// Target streams split into centroid-building shots and evaluation streams.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSplit {
    /// Up to `max_shots` streams per class, in shot order.
    pub shots: Dataset,
    pub eval: Dataset,
}

impl TargetSplit {
    /// The first `n` shots of every class.
    pub fn first_shots(&self, n: usize) -> Dataset {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let keep: Vec<usize> = self
            .shots
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                let c = seen.entry(s.video_id.as_str()).or_insert(0);
                *c += 1;
                *c <= n
            })
            .map(|(i, _)| i)
            .collect();
        self.shots.subset(&keep)
    }
}

/// Reserves `max_shots` seeded-random streams per class; the rest is for
/// evaluation, so every shot count is scored on the same streams.
pub fn split_target_shots(target_ds: &Dataset, max_shots: usize, seed: u64) -> Result<TargetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shot_idx = Vec::new();
    let mut eval_idx = Vec::new();
    for (id, mut idx) in target_ds.indices_by_class() {
        if idx.len() <= max_shots {
            return Err(Error::InsufficientShots {
                video_id: id,
                requested: max_shots + 1,
                available: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        shot_idx.extend_from_slice(&idx[..max_shots]);
        eval_idx.extend_from_slice(&idx[max_shots..]);
    }
    eval_idx.sort_unstable();
    Ok(TargetSplit {
        shots: target_ds.subset(&shot_idx),
        eval: target_ds.subset(&eval_idx),
    })
}

/// Metrics on the target evaluation streams with the source centroids
/// (`shots == 0`) or with centroids rebuilt from `shots` target streams.
pub fn transfer_eval<T: Scalar>(
    model: &EmbeddingModel<T>,
    source_gallery: &Gallery,
    split: &TargetSplit,
    out_ds: &Dataset,
    shots: usize,
) -> Result<RunMetrics> {
    let gallery = if shots == 0 {
        source_gallery.clone()
    } else {
        let s = split.first_shots(shots);
        let eval_ids: BTreeSet<&str> = split.eval.samples.iter().map(|x| x.stream_id.as_str()).collect();
        if let Some(x) = s.samples.iter().find(|x| eval_ids.contains(x.stream_id.as_str())) {
            return Err(Error::Invalid(format!("stream {} is both a shot and an evaluation stream", x.stream_id)));
        }
        replace_centroids(source_gallery, model, &s)?
    };
    robustness_eval(&GalleryClassifier { model, gallery: &gallery }, &split.eval, out_ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub shots: Vec<usize>,
    /// Also train a model from scratch on the target shots and score it on
    /// the same evaluation streams.
    #[serde(default)]
    pub target_baseline: Option<(BackboneConfig, TrainConfig)>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            shots: vec![0, 1, 3],
            target_baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRun {
    pub seed: u64,
    pub per_shot: Vec<RunMetrics>,
    pub target_baseline: Option<RunMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub shots: Vec<usize>,
    /// One report per entry of `shots`.
    pub reports: Vec<MetricsReport>,
    pub target_baseline: Option<MetricsReport>,
    pub runs: Vec<TransferRun>,
}

/// Swaps the source centroids of `source_model` for target-domain ones.
pub fn transfer_protocol<T: Scalar>(
    source_model: &EmbeddingModel<T>,
    source_ds: &Dataset,
    target_ds: &Dataset,
    out_ds: &Dataset,
    cfg: &TransferConfig,
    seeds: &[u64],
) -> Result<TransferReport> {
    if cfg.shots.is_empty() || seeds.is_empty() {
        return Err(Error::config("shots", "need at least one shot count and seed"));
    }
    let source_gallery = build_gallery(source_model, source_ds)?;
    for id in target_ds.class_ids() {
        if source_gallery.index_of(&id).is_none() {
            return Err(Error::UnknownClass(id));
        }
    }
    let max_shots = cfg.shots.iter().copied().max().unwrap_or(0);
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let split = split_target_shots(target_ds, max_shots, seed)?;
        let per_shot = cfg
            .shots
            .iter()
            .map(|&n| transfer_eval(source_model, &source_gallery, &split, out_ds, n))
            .collect::<Result<Vec<_>>>()?;
        let target_baseline = match &cfg.target_baseline {
            Some((backbone, tcfg)) => {
                let model = EmbeddingModel::<f32>::new(backbone.clone(), seed)?;
                let tcfg = TrainConfig { seed, ..tcfg.clone() };
                let model = train(model, &split.shots, &tcfg, None)?.model;
                let g = build_gallery(&model, &split.shots)?;
                Some(robustness_eval(&GalleryClassifier { model: &model, gallery: &g }, &split.eval, out_ds)?)
            }
            None => None,
        };
        runs.push(TransferRun {
            seed,
            per_shot,
            target_baseline,
        });
    }
    let reports = (0..cfg.shots.len())
        .map(|j| aggregate_runs(&runs.iter().map(|r| r.per_shot[j]).collect::<Vec<_>>(), seeds))
        .collect::<Result<Vec<_>>>()?;
    let target_baseline = match cfg.target_baseline {
        Some(_) => Some(aggregate_runs(
            &runs.iter().filter_map(|r| r.target_baseline).collect::<Vec<_>>(),
            seeds,
        )?),
        None => None,
    };
    Ok(TransferReport {
        shots: cfg.shots.clone(),
        reports,
        target_baseline,
        runs,
    })
}
