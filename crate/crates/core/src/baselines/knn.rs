use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowio::{Dataset, N_BUCKETS, N_DIRECTIONS};

pub const FEATURE_LEN: usize = N_DIRECTIONS * N_BUCKETS;
pub const DEFAULT_K_CANDIDATES: [usize; 6] = [1, 3, 5, 7, 9, 11];

/// k-nearest-neighbour classifier on flattened standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub train_features: Array2<f64>,
    pub train_labels: Vec<usize>,
    pub class_ids: Vec<String>,
    pub k: usize,
    /// Mean cross-validation accuracy per candidate, in candidate order.
    pub cv_scores: Vec<(usize, f64)>,
}

/// Flattened `N × 480` feature matrix.
pub fn flat_features(ds: &Dataset) -> Array2<f64> {
    let mut out = Array2::zeros((ds.len(), FEATURE_LEN));
    for (mut row, s) in out.axis_iter_mut(Axis(0)).zip(&ds.samples) {
        for (dst, &v) in row.iter_mut().zip(s.flat()) {
            *dst = v as f64;
        }
    }
    out
}

fn sq_norms(x: &Array2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r))
}

/// Squared distances between rows of `a` and rows of `b`, clamped at zero.
fn sq_distances(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let na = sq_norms(a);
    let nb = sq_norms(b);
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
    }
    d
}

/// Neighbour order by `(distance, index)`.
fn ranked(dists: ArrayView1<f64>, candidates: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    order
}

/// Majority vote over the first `k` of `neighbours`. A tied vote goes to the
/// tied label whose closest member ranks first.
fn vote(neighbours: &[usize], labels: &[usize], k: usize) -> (usize, f64) {
    let top = &neighbours[..k.min(neighbours.len())];
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &n in top {
        match counts.iter_mut().find(|(l, _)| *l == labels[n]) {
            Some((_, c)) => *c += 1,
            None => counts.push((labels[n], 1)),
        }
    }
    // counts is in order of first appearance, so the first maximum wins ties
    let (label, count) = counts
        .iter()
        .fold((usize::MAX, 0), |best, &(l, c)| if c > best.1 { (l, c) } else { best });
    (label, count as f64 / top.len() as f64)
}

/// Chooses `k` by `cv_folds`-fold cross-validation (ties go to the smallest
/// `k`). Fold of sample `i` is its position in a seeded shuffle modulo the
/// fold count.
pub fn knn_fit(train_ds: &Dataset, k_candidates: &[usize], cv_folds: usize, seed: u64) -> Result<KnnModel> {
    if k_candidates.is_empty() {
        return Err(Error::config("k_candidates", "must not be empty"));
    }
    if k_candidates.contains(&0) {
        return Err(Error::config("k_candidates", "k must be positive"));
    }
    if cv_folds < 2 {
        return Err(Error::config("cv_folds", "must be at least 2"));
    }
    let n = train_ds.len();
    if n < cv_folds {
        return Err(Error::config("cv_folds", format!("{n} samples cannot fill {cv_folds} folds")));
    }
    let features = flat_features(train_ds);
    let labels = train_ds.labels();

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold[i] = pos % cv_folds;
    }

    let dists = sq_distances(&features, &features);
    let mut correct = vec![vec![0usize; cv_folds]; k_candidates.len()];
    let mut fold_sizes = vec![0usize; cv_folds];
    let folds: Vec<Vec<usize>> = (0..cv_folds)
        .map(|f| (0..n).filter(|&i| fold[i] != f).collect())
        .collect();
    for q in 0..n {
        let f = fold[q];
        fold_sizes[f] += 1;
        let order = ranked(dists.row(q), &folds[f]);
        for (ci, &k) in k_candidates.iter().enumerate() {
            if vote(&order, &labels, k).0 == labels[q] {
                correct[ci][f] += 1;
            }
        }
    }
    let cv_scores: Vec<(usize, f64)> = k_candidates
        .iter()
        .zip(&correct)
        .map(|(&k, c)| {
            let mean = c
                .iter()
                .zip(&fold_sizes)
                .map(|(&c, &s)| c as f64 / s as f64)
                .sum::<f64>()
                / cv_folds as f64;
            (k, mean)
        })
        .collect();
    let k = cv_scores
        .iter()
        .fold(None, |best: Option<(usize, f64)>, &(k, acc)| match best {
            Some((bk, bacc)) if bacc > acc || (bacc == acc && bk <= k) => Some((bk, bacc)),
            _ => Some((k, acc)),
        })
        .map(|(k, _)| k)
        .expect("non-empty candidates");
    log::info!("kNN cross-validation {cv_scores:?}, selected k={k}");
    Ok(KnnModel {
        train_features: features,
        train_labels: labels,
        class_ids: train_ds.class_ids(),
        k: k.min(n),
        cv_scores,
    })
}

impl KnnModel {
    /// Fixed-`k` model without cross-validation.
    pub fn with_k(train_ds: &Dataset, k: usize) -> Result<Self> {
        if k == 0 || k > train_ds.len() {
            return Err(Error::config("k", "must be in 1..=N"));
        }
        Ok(KnnModel {
            train_features: flat_features(train_ds),
            train_labels: train_ds.labels(),
            class_ids: train_ds.class_ids(),
            k,
            cv_scores: Vec::new(),
        })
    }

    /// `(class index, vote fraction)` for every row of `queries` (`M × 480`).
    pub fn predict_batch(&self, queries: &Array2<f64>) -> Result<Vec<(usize, f64)>> {
        if queries.ncols() != self.train_features.ncols() {
            return Err(Error::Shape(format!(
                "expected {}-dimensional queries, got {}",
                self.train_features.ncols(),
                queries.ncols()
            )));
        }
        let all: Vec<usize> = (0..self.train_features.nrows()).collect();
        let dists = sq_distances(queries, &self.train_features);
        Ok(dists
            .axis_iter(Axis(0))
            .map(|row| vote(&ranked(row, &all), &self.train_labels, self.k))
            .collect())
    }
}

/// `(class index, vote fraction)` for one 480-dimensional query.
pub fn knn_predict(model: &KnnModel, x: ArrayView1<f64>) -> Result<(usize, f64)> {
    let q = x.to_owned().insert_axis(Axis(0));
    Ok(model.predict_batch(&q)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowio::{Split, StreamSample};
    use ndarray::Array2 as A2;

    fn sample(video: &str, i: usize, level: f32) -> StreamSample {
        let mut f = A2::<f32>::zeros((2, 240));
        f[[0, i % 240]] = level;
        f[[1, 0]] = level;
        StreamSample::new(video.to_string(), format!("{video}-{i}"), Split::Train, f).unwrap()
    }

    fn two_class() -> Dataset {
        let mut v = Vec::new();
        for i in 0..10 {
            v.push(sample("a", 0, 1.0 + i as f32 * 0.01));
            v.push(sample("b", 0, 10.0 + i as f32 * 0.01));
        }
        Dataset::new(v)
    }

    #[test]
    fn separable_toy_selects_k1() {
        let m = knn_fit(&two_class(), &[1, 3, 5], 5, 0).unwrap();
        assert_eq!(m.k, 1);
        assert!(m.cv_scores.iter().all(|&(_, a)| a == 1.0));
    }

    #[test]
    fn fit_is_reproducible() {
        let a = knn_fit(&two_class(), &[1, 3], 5, 4).unwrap();
        let b = knn_fit(&two_class(), &[1, 3], 5, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_candidates_rejected() {
        assert!(knn_fit(&two_class(), &[], 5, 0).is_err());
    }

    #[test]
    fn exact_training_point_has_full_confidence() {
        let ds = two_class();
        let m = KnnModel::with_k(&ds, 1).unwrap();
        let q = m.train_features.row(3).to_owned();
        let (c, conf) = knn_predict(&m, q.view()).unwrap();
        assert_eq!(c, ds.labels()[3]);
        assert_eq!(conf, 1.0);
    }

    #[test]
    fn vote_two_to_one() {
        let labels = [0, 1, 1, 0];
        assert_eq!(vote(&[0, 1, 2], &labels, 3), (1, 2.0 / 3.0));
        // 1-1 tie goes to the nearest neighbour's label
        assert_eq!(vote(&[1, 0], &labels, 2), (1, 0.5));
        assert_eq!(vote(&[0, 1], &labels, 2), (0, 0.5));
    }
}
