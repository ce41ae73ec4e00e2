use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{to_seq, BackboneConfig, Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::flowio::Dataset;
use crate::nn::{softmax_rows, Act, Layer, Linear, Network, Scalar};
use crate::optim::AdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for CeConfig {
    fn default() -> Self {
        CeConfig {
            epochs: 250,
            batch_size: 128,
            lr: 3e-4,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// The backbone followed by a K-way linear layer and softmax.
#[derive(Debug, Clone)]
pub struct CeClassifier<T> {
    pub config: BackboneConfig,
    pub net: Network<T>,
    pub class_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CeOutcome<T> {
    pub classifier: CeClassifier<T>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl<T: Scalar> PartialEq for CeClassifier<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.class_ids == other.class_ids
            && self.net.named_params().iter().zip(other.net.named_params()).all(|(a, b)| a.1.value == b.1.value)
    }
}

impl<T: Scalar> CeClassifier<T> {
    pub fn new(config: BackboneConfig, class_ids: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if class_ids.len() < 2 {
            return Err(Error::NotEnoughClasses {
                required: 2,
                available: class_ids.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = config.layers(&mut rng);
        layers.push(Layer::Linear(Linear::new(config.embedding_dim, class_ids.len(), &mut rng)));
        Ok(CeClassifier {
            config,
            net: Network::new(layers),
            class_ids,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Array3<T>) -> Result<Array2<T>> {
        let (_, c, l) = x.dim();
        if c != self.config.in_channels || l != self.config.input_len {
            return Err(Error::Shape(format!("expected B×{}×{}, got {:?}", self.config.in_channels, self.config.input_len, x.dim())));
        }
        if x.dim().0 == 0 {
            return Ok(Array2::zeros((0, self.n_classes())));
        }
        Ok(self.net.forward_eval(to_seq(x)).into_flat())
    }

    /// Softmax probabilities for every sample of `ds`, in dataset order.
    pub fn score_dataset(&self, ds: &Dataset) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ds.len(), self.n_classes()));
        let idx = ds.all_indices();
        for (c, chunk) in idx.chunks(256).enumerate() {
            let p = softmax_rows(&self.logits(&ds.batch::<T>(chunk))?.mapv(|v| v.as_f64()));
            out.slice_mut(ndarray::s![c * 256..c * 256 + chunk.len(), ..]).assign(&p);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::capture(ModelKind::Classifier, &self.config, &self.net, Some(self.class_ids.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::<T>::load(path)?;
        if ckpt.kind != ModelKind::Classifier {
            return Err(Error::Incompatible("not a classifier checkpoint".to_string()));
        }
        let ids = ckpt
            .class_ids
            .clone()
            .ok_or_else(|| Error::Incompatible("classifier checkpoint without class ids".to_string()))?;
        let mut clf = CeClassifier::new(ckpt.config.clone(), ids, 0)?;
        ckpt.restore_into(&mut clf.net)?;
        Ok(clf)
    }
}

/// Softmax probabilities of one `[2, 240]`-shaped input batch.
pub fn ce_score<T: Scalar>(clf: &CeClassifier<T>, x: &Array3<T>) -> Result<Array2<f64>> {
    Ok(softmax_rows(&clf.logits(x)?.mapv(|v| v.as_f64())))
}

/// Mean softmax cross-entropy of `logits` against `labels` and its gradient.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[[i, y]] -= 1.0;
    }
    grad /= n;
    (loss / n, grad)
}

/// Softmax cross-entropy training over shuffled batches.
pub fn ce_train<T: Scalar>(train_ds: &Dataset, backbone: &BackboneConfig, cfg: &CeConfig) -> Result<CeOutcome<T>> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::config("lr", "must be positive"));
    }
    let labels = train_ds.labels();
    let mut clf = CeClassifier::<T>::new(backbone.clone(), train_ds.class_ids(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::<T>::new(cfg.lr, cfg.weight_decay);
    let mut order = train_ds.all_indices();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            // a single-sample batch has no batch statistics
            if chunk.len() < 2 {
                continue;
            }
            step += 1;
            let x: Array3<T> = train_ds.batch(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (out, tape) = clf.net.forward_train(to_seq(&x), &mut rng);
            let logits = out.into_flat().mapv(|v| v.as_f64());
            let (loss, grad) = cross_entropy(&logits, &y);
            if !loss.is_finite() {
                return Err(Error::Diverged { step, epoch, loss });
            }
            clf.net.zero_grad();
            clf.net.backward(&tape, Act::Flat(grad.mapv(T::from_f64_lossy)));
            opt.step(clf.net.params_mut());
            total += loss;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        log::debug!("ce epoch {epoch} mean loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(CeOutcome {
        classifier: clf,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits = arr2(&[[0.3, -1.2, 0.5], [2.0, 0.1, -0.4]]);
        let labels = [2, 0];
        let (_, g) = cross_entropy(&logits, &labels);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let fd = (cross_entropy(&p, &labels).0 - cross_entropy(&m, &labels).0) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let (l, _) = cross_entropy(&Array2::zeros((4, 5)), &[0, 1, 2, 3]);
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }
}
