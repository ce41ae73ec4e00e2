//! Triplet loss with online mining inside balanced batches, plus the
//! outlier-leveraging term whose negatives come from a pool of streams of
//! unrelated videos.

mod train;

pub use train::{train, write_loss_log, StepLog, TrainConfig, TrainOutcome};

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Batch indices of one `(anchor, positive, negative)` triplet. For
/// outlier-leveraging triplets `negative` indexes the OOD pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    SemiHard,
    Hardest,
}

impl MiningStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            MiningStrategy::SemiHard => "semi_hard",
            MiningStrategy::Hardest => "hardest",
        }
    }
}

/// Euclidean distance matrix between the rows of `emb`, in `f64`.
pub fn pairwise_distances<T: Scalar>(emb: ArrayView2<T>) -> Array2<f64> {
    cross_distances(emb, emb)
}

/// `out[i][j] = ‖a_i − b_j‖₂`.
pub fn cross_distances<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            let ss: f64 = ra
                .iter()
                .zip(rb.iter())
                .map(|(&x, &y)| {
                    let d = (x - y).as_f64();
                    d * d
                })
                .sum();
            out[[i, j]] = ss.sqrt();
        }
    }
    out
}

/// Ordered anchor-positive pairs `(a, p)`, `a ≠ p`, same label; anchors
/// ascending, then positives ascending.
pub fn anchor_positive_pairs(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for a in 0..labels.len() {
        for p in 0..labels.len() {
            if a != p && labels[a] == labels[p] {
                pairs.push((a, p));
            }
        }
    }
    pairs
}

/// Picks a negative among `candidates` (`(index, d(a,n))`, ascending index).
///
/// Semi-hard draws uniformly among `d(a,p) < d(a,n) < d(a,p) + m`, consuming
/// one RNG draw only when that set is non-empty. Hardest takes the smallest
/// `d(a,n)` (lowest index on ties) and keeps it only if the hinge is positive.
fn select_negative(
    d_ap: f64,
    candidates: impl Iterator<Item = (usize, f64)>,
    margin: f64,
    strategy: MiningStrategy,
    rng: &mut impl Rng,
) -> Option<usize> {
    match strategy {
        MiningStrategy::SemiHard => {
            let pool: Vec<usize> = candidates
                .filter(|&(_, d_an)| d_ap < d_an && d_an < d_ap + margin)
                .map(|(n, _)| n)
                .collect();
            if pool.is_empty() {
                None
            } else {
                Some(pool[rng.random_range(0..pool.len())])
            }
        }
        MiningStrategy::Hardest => {
            let mut best: Option<(usize, f64)> = None;
            for (n, d_an) in candidates {
                if best.is_none_or(|(_, d)| d_an < d) {
                    best = Some((n, d_an));
                }
            }
            best.filter(|&(_, d_an)| margin + d_ap - d_an > 0.0).map(|(n, _)| n)
        }
    }
}

fn mine_in_batch(
    dists: &Array2<f64>,
    labels: &[usize],
    margin: f64,
    strategy: MiningStrategy,
    rng: &mut impl Rng,
) -> Vec<Triplet> {
    anchor_positive_pairs(labels)
        .into_iter()
        .filter_map(|(a, p)| {
            let candidates = (0..labels.len())
                .filter(|&n| labels[n] != labels[a])
                .map(|n| (n, dists[[a, n]]));
            select_negative(dists[[a, p]], candidates, margin, strategy, rng).map(|n| Triplet {
                anchor: a,
                positive: p,
                negative: n,
            })
        })
        .collect()
}

/// One semi-hard negative per anchor-positive pair, drawn with `rng`.
pub fn mine_semi_hard(dists: &Array2<f64>, labels: &[usize], margin: f64, rng: &mut impl Rng) -> Vec<Triplet> {
    mine_in_batch(dists, labels, margin, MiningStrategy::SemiHard, rng)
}

/// The closest negative per anchor-positive pair, kept when its loss is positive.
pub fn mine_hardest(dists: &Array2<f64>, labels: &[usize], margin: f64) -> Vec<Triplet> {
    // Hardest mining never draws from the RNG.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    mine_in_batch(dists, labels, margin, MiningStrategy::Hardest, &mut rng)
}

pub fn mine(
    dists: &Array2<f64>,
    labels: &[usize],
    margin: f64,
    strategy: MiningStrategy,
    rng: &mut impl Rng,
) -> Vec<Triplet> {
    mine_in_batch(dists, labels, margin, strategy, rng)
}

/// Mines negatives for `pairs` from an OOD pool; `pool_dists[a][j]` is the
/// distance from batch row `a` to pool row `j`.
pub fn mine_pool(
    batch_dists: &Array2<f64>,
    pool_dists: &Array2<f64>,
    pairs: &[(usize, usize)],
    margin: f64,
    strategy: MiningStrategy,
    rng: &mut impl Rng,
) -> Vec<Triplet> {
    pairs
        .iter()
        .filter_map(|&(a, p)| {
            let candidates = pool_dists.row(a).into_iter().copied().enumerate().collect::<Vec<_>>();
            select_negative(batch_dists[[a, p]], candidates.into_iter(), margin, strategy, rng).map(|n| Triplet {
                anchor: a,
                positive: p,
                negative: n,
            })
        })
        .collect()
}

/// Mean hinge loss of a triplet set; an empty set gives zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub n_triplets: usize,
}

impl LossValue {
    /// True when no triplet was available.
    pub fn is_empty(&self) -> bool {
        self.n_triplets == 0
    }
}

fn l2(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean of `max(0, m + ‖a − p‖ − ‖a − n‖)` and its gradient.
///
/// Anchors and positives index `anchors`, negatives index `negatives`
/// (pass the same matrix twice for in-batch triplets). Returns gradients
/// with respect to both matrices; when they alias, sum the two.
pub fn hinge_loss_grad(
    anchors: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    triplets: &[Triplet],
    margin: f64,
) -> (LossValue, Array2<f64>, Array2<f64>) {
    let mut g_a = Array2::zeros(anchors.raw_dim());
    let mut g_n = Array2::zeros(negatives.raw_dim());
    if triplets.is_empty() {
        return (LossValue { value: 0.0, n_triplets: 0 }, g_a, g_n);
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut total = 0.0;
    for t in triplets {
        let a = anchors.row(t.anchor);
        let p = anchors.row(t.positive);
        let n = negatives.row(t.negative);
        let d_ap = l2(a, p);
        let d_an = l2(a, n);
        let hinge = margin + d_ap - d_an;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        let dim = a.len();
        for k in 0..dim {
            let u = if d_ap > 0.0 { (a[k] - p[k]) / d_ap } else { 0.0 };
            let v = if d_an > 0.0 { (a[k] - n[k]) / d_an } else { 0.0 };
            g_a[[t.anchor, k]] += scale * (u - v);
            g_a[[t.positive, k]] -= scale * u;
            g_n[[t.negative, k]] += scale * v;
        }
    }
    (
        LossValue {
            value: total * scale,
            n_triplets: triplets.len(),
        },
        g_a,
        g_n,
    )
}

/// Triplet loss of in-batch triplets over embeddings `emb`.
pub fn triplet_loss<T: Scalar>(emb: ArrayView2<T>, triplets: &[Triplet], margin: f64) -> LossValue {
    let e = emb.mapv(|v| v.as_f64());
    hinge_loss_grad(e.view(), e.view(), triplets, margin).0
}

/// Outlier-leveraging loss: anchor-positive pairs from the batch, negatives
/// mined from the OOD pool with the given strategy.
pub fn ol_loss<T: Scalar>(
    emb_in: ArrayView2<T>,
    pairs: &[(usize, usize)],
    emb_pool: ArrayView2<T>,
    margin: f64,
    strategy: MiningStrategy,
    rng: &mut impl Rng,
) -> Result<LossValue> {
    if emb_pool.nrows() == 0 {
        return Err(Error::MissingOodPool);
    }
    let batch_d = pairwise_distances(emb_in);
    let pool_d = cross_distances(emb_in, emb_pool);
    let triplets = mine_pool(&batch_d, &pool_d, pairs, margin, strategy, rng);
    let a = emb_in.mapv(|v| v.as_f64());
    let n = emb_pool.mapv(|v| v.as_f64());
    Ok(hinge_loss_grad(a.view(), n.view(), &triplets, margin).0)
}

/// `l_triplet + λ · l_ol`.
pub fn combined_loss(l_triplet: f64, l_ol: f64, lambda: f64) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::config("ol_weight", "must be non-negative"));
    }
    Ok(l_triplet + lambda * l_ol)
}

/// Draws `p` distinct classes and `k` samples of each, class-major.
///
/// `labels` are the class indices of the dataset rows. Classes with fewer
/// than `k` rows are sampled with replacement.
pub fn sample_balanced_batch(labels: &[usize], p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    BalancedSampler::new(labels).sample(p, k, rng)
}

/// Precomputed class membership for repeated balanced sampling.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
}

impl BalancedSampler {
    pub fn new(labels: &[usize]) -> Self {
        let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class.retain(|c| !c.is_empty());
        BalancedSampler { by_class }
    }

    pub fn n_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn sample(&self, p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if p > self.by_class.len() || p == 0 {
            return Err(Error::NotEnoughClasses {
                required: p.max(1),
                available: self.by_class.len(),
            });
        }
        let mut out = Vec::with_capacity(p * k);
        for c in index::sample(rng, self.by_class.len(), p) {
            let members = &self.by_class[c];
            if members.len() >= k {
                out.extend(index::sample(rng, members.len(), k).into_iter().map(|i| members[i]));
            } else {
                out.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
            }
        }
        Ok(out)
    }
}
