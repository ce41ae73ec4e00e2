use std::io::Write;

use ndarray::{concatenate, s, Array2, Array3, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{anchor_positive_pairs, cross_distances, hinge_loss_grad, mine, mine_pool, pairwise_distances, BalancedSampler, MiningStrategy};
use crate::backbone::EmbeddingModel;
use crate::error::{Error, Result};
use crate::flowio::Dataset;
use crate::nn::Scalar;
use crate::optim::AdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub epochs: usize,
    /// Epochs `1..=semi_hard_epochs` mine semi-hard negatives, later ones the hardest.
    pub semi_hard_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub videos_per_batch: usize,
    pub samples_per_video: usize,
    /// λ, weight of the outlier-leveraging term.
    pub ol_weight: f64,
    /// Enables outlier leveraging; requires a tune dataset.
    pub use_ol: bool,
    /// OOD streams drawn from the tune set per step.
    pub ol_pool_size: usize,
    /// Defaults to `ceil(N / (P·K))`.
    pub steps_per_epoch: Option<usize>,
    pub runs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.2,
            epochs: 250,
            semi_hard_epochs: 10,
            lr: 3e-4,
            weight_decay: 0.01,
            videos_per_batch: 5,
            samples_per_video: 25,
            ol_weight: 1.0,
            use_ol: false,
            ol_pool_size: 32,
            steps_per_epoch: None,
            runs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.videos_per_batch < 2 {
            return Err(Error::config("videos_per_batch", "must be at least 2"));
        }
        if self.samples_per_video < 2 {
            return Err(Error::config("samples_per_video", "must be at least 2"));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::config("margin", "must be positive"));
        }
        if self.ol_weight.is_nan() || self.ol_weight < 0.0 {
            return Err(Error::config("ol_weight", "must be non-negative"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.use_ol && self.ol_pool_size == 0 {
            return Err(Error::config("ol_pool_size", "must be positive when OL is enabled"));
        }
        Ok(())
    }

    pub fn strategy_for_epoch(&self, epoch: usize) -> MiningStrategy {
        if epoch <= self.semi_hard_epochs {
            MiningStrategy::SemiHard
        } else {
            MiningStrategy::Hardest
        }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub strategy: MiningStrategy,
    pub n_triplets: usize,
    pub loss_triplet: f64,
    pub loss_ol: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: EmbeddingModel<T>,
    pub log: Vec<StepLog>,
}

impl<T> TrainOutcome<T> {
    /// Mean total loss over the steps of `epoch`.
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self
            .log
            .iter()
            .filter(|l| l.epoch == epoch)
            .map(|l| l.loss_total)
            .collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Writes `step,epoch,strategy,n_triplets,loss_triplet,loss_ol,loss_total`.
pub fn write_loss_log<W: Write>(log: &[StepLog], w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(["step", "epoch", "strategy", "n_triplets", "loss_triplet", "loss_ol", "loss_total"])?;
    for l in log {
        writer.write_record([
            l.step.to_string(),
            l.epoch.to_string(),
            l.strategy.as_str().to_string(),
            l.n_triplets.to_string(),
            l.loss_triplet.to_string(),
            l.loss_ol.to_string(),
            l.loss_total.to_string(),
        ])?;
    }
    writer.flush().map_err(|e| Error::io("<loss log>", e))
}

/// Trains `model` with online-mined triplets over balanced batches.
///
/// Every optimizer step samples `P` videos × `K` streams, embeds them (plus
/// an OOD pool from `tune_ds` when outlier leveraging is on, in the same
/// forward pass), mines triplets with the epoch's strategy and applies one
/// AdamW update. Steps where nothing was mined are logged and skipped.
pub fn train<T: Scalar>(
    mut model: EmbeddingModel<T>,
    train_ds: &Dataset,
    cfg: &TrainConfig,
    tune_ds: Option<&Dataset>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let labels = train_ds.labels();
    let sampler = BalancedSampler::new(&labels);
    if sampler.n_classes() < 2 {
        return Err(Error::NotEnoughClasses {
            required: 2,
            available: sampler.n_classes(),
        });
    }
    if sampler.n_classes() < cfg.videos_per_batch {
        return Err(Error::NotEnoughClasses {
            required: cfg.videos_per_batch,
            available: sampler.n_classes(),
        });
    }
    let ood = match (cfg.use_ol && cfg.ol_weight > 0.0, tune_ds) {
        (true, Some(t)) if !t.is_empty() => Some(t),
        (true, _) => return Err(Error::MissingOodPool),
        (false, _) => None,
    };

    let batch_size = cfg.videos_per_batch * cfg.samples_per_video;
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| train_ds.len().div_ceil(batch_size))
        .max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::<T>::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let strategy = cfg.strategy_for_epoch(epoch);
        for _ in 0..steps_per_epoch {
            step += 1;
            let idx = sampler.sample(cfg.videos_per_batch, cfg.samples_per_video, &mut rng)?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut x: Array3<T> = train_ds.batch(&idx);
            let mut n_pool = 0;
            if let Some(tune) = ood {
                n_pool = cfg.ol_pool_size.min(tune.len());
                let pool_idx = index::sample(&mut rng, tune.len(), n_pool).into_vec();
                x = concatenate(Axis(0), &[x.view(), tune.batch::<T>(&pool_idx).view()])
                    .expect("matching feature shapes");
            }

            let (emb, tape) = model.forward_train(&x, &mut rng)?;
            let e = emb.mapv(|v| v.as_f64());
            let b = idx.len();
            let batch_e = e.slice(s![..b, ..]);
            let dists = pairwise_distances(batch_e);
            let triplets = mine(&dists, &batch_labels, cfg.margin, strategy, &mut rng);
            let (lt, g_a, g_n) = hinge_loss_grad(batch_e, batch_e, &triplets, cfg.margin);
            let mut grad = Array2::<f64>::zeros(e.raw_dim());
            {
                let mut gb = grad.slice_mut(s![..b, ..]);
                gb += &g_a;
                gb += &g_n;
            }

            let mut loss_ol = 0.0;
            let mut n_ol = 0;
            if n_pool > 0 {
                let pool_e = e.slice(s![b.., ..]);
                let pool_d = cross_distances(batch_e, pool_e);
                let pairs = anchor_positive_pairs(&batch_labels);
                let ol_triplets = mine_pool(&dists, &pool_d, &pairs, cfg.margin, strategy, &mut rng);
                let (lo, ga, gn) = hinge_loss_grad(batch_e, pool_e, &ol_triplets, cfg.margin);
                loss_ol = lo.value;
                n_ol = lo.n_triplets;
                let mut gb = grad.slice_mut(s![..b, ..]);
                gb.scaled_add(cfg.ol_weight, &ga);
                let mut gp = grad.slice_mut(s![b.., ..]);
                gp.scaled_add(cfg.ol_weight, &gn);
            }

            let total = lt.value + cfg.ol_weight * loss_ol;
            if !total.is_finite() || e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step, epoch, loss: total });
            }
            log.push(StepLog {
                step,
                epoch,
                strategy,
                n_triplets: lt.n_triplets,
                loss_triplet: lt.value,
                loss_ol,
                loss_total: total,
            });
            if lt.n_triplets + n_ol == 0 {
                continue;
            }
            model.net.zero_grad();
            model.backward(&tape, grad.mapv(T::from_f64_lossy));
            opt.step(model.net.params_mut());
        }
        if let Some(mean) = epoch_mean(&log, epoch) {
            log::debug!("epoch {epoch} ({}) mean loss {mean:.5}", strategy.as_str());
        }
    }
    Ok(TrainOutcome { model, log })
}

fn epoch_mean(log: &[StepLog], epoch: usize) -> Option<f64> {
    let v: Vec<f64> = log.iter().filter(|l| l.epoch == epoch).map(|l| l.loss_total).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
