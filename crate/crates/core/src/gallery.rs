//! Per-video centroids in embedding space and centroid-based inference.
//!
//! The score of class `k` is the softmax of negative Euclidean distances to
//! the centroids; the prediction is its argmax (the nearest centroid) and
//! the confidence its maximum.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::EmbeddingModel;
use crate::error::{Error, Result};
use crate::flowio::{Dataset, StreamSample};
use crate::nn::Scalar;

pub const GALLERY_VERSION: &str = "gallery/1";

/// Immutable set of class centroids. Edits return a new gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    centroids: Array2<f64>,
    class_ids: Vec<String>,
    shots_per_class: Vec<usize>,
}

impl Gallery {
    /// Builds centroids from embeddings grouped by `video_ids` (aligned rows).
    /// Classes are ordered by first appearance.
    pub fn from_embeddings(embeddings: ArrayView2<f64>, video_ids: &[String]) -> Result<Self> {
        if embeddings.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if embeddings.nrows() != video_ids.len() {
            return Err(Error::LengthMismatch(embeddings.nrows(), video_ids.len()));
        }
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, id) in video_ids.iter().enumerate() {
            let g = groups.entry(id.as_str()).or_default();
            if g.is_empty() {
                order.push(id.clone());
            }
            g.push(i);
        }
        let dim = embeddings.ncols();
        let mut centroids = Array2::zeros((order.len(), dim));
        let mut shots = Vec::with_capacity(order.len());
        for (k, id) in order.iter().enumerate() {
            let rows = &groups[id.as_str()];
            centroids.row_mut(k).assign(&mean_of(embeddings, rows));
            shots.push(rows.len());
        }
        Gallery::new(centroids, order, shots)
    }

    pub fn new(centroids: Array2<f64>, class_ids: Vec<String>, shots_per_class: Vec<usize>) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if centroids.nrows() != class_ids.len() || shots_per_class.len() != class_ids.len() {
            return Err(Error::LengthMismatch(centroids.nrows(), class_ids.len()));
        }
        let unique: BTreeSet<&String> = class_ids.iter().collect();
        if unique.len() != class_ids.len() {
            return Err(Error::Invalid("duplicate class ids in gallery".to_string()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite centroid".to_string()));
        }
        Ok(Gallery {
            centroids,
            class_ids,
            shots_per_class,
        })
    }

    pub fn centroids(&self) -> ArrayView2<'_, f64> {
        self.centroids.view()
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn shots_per_class(&self) -> &[usize] {
        &self.shots_per_class
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn index_of(&self, video_id: &str) -> Option<usize> {
        self.class_ids.iter().position(|c| c == video_id)
    }

    fn check_dim(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "embedding has {} dims, gallery {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn distances(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_dim(x)?;
        Ok(self
            .centroids
            .rows()
            .into_iter()
            .map(|c| c.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect())
    }

    /// Softmax over negative centroid distances.
    pub fn score(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let d = self.distances(x)?;
        // max of −d is −min(d)
        let shift = d.iter().copied().fold(f64::INFINITY, f64::min);
        let mut s = d.mapv(|v| (shift - v).exp());
        let total = s.sum();
        s.mapv_inplace(|v| v / total);
        Ok(s)
    }

    /// Index of the highest score; ties go to the lowest index.
    pub fn predict(&self, x: ArrayView1<f64>) -> Result<usize> {
        Ok(argmax(self.score(x)?.view()))
    }

    pub fn confidence(&self, x: ArrayView1<f64>) -> Result<f64> {
        let s = self.score(x)?;
        Ok(s.fold(0.0, |m: f64, &v| m.max(v)))
    }

    /// `(class index, confidence)` in one pass.
    pub fn classify(&self, x: ArrayView1<f64>) -> Result<(usize, f64)> {
        let s = self.score(x)?;
        let k = argmax(s.view());
        Ok((k, s[k]))
    }

    /// Adds one new class from raw embeddings of its shots.
    pub fn with_class(&self, video_id: &str, shot_embeddings: ArrayView2<f64>) -> Result<Gallery> {
        if self.index_of(video_id).is_some() {
            return Err(Error::DuplicateClass(video_id.to_string()));
        }
        if shot_embeddings.nrows() == 0 {
            return Err(Error::InsufficientShots {
                video_id: video_id.to_string(),
                requested: 1,
                available: 0,
            });
        }
        if shot_embeddings.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "shots have {} dims, gallery {}",
                shot_embeddings.ncols(),
                self.dim()
            )));
        }
        let rows: Vec<usize> = (0..shot_embeddings.nrows()).collect();
        let c = mean_of(shot_embeddings, &rows);
        let mut centroids = Array2::zeros((self.n_classes() + 1, self.dim()));
        centroids.slice_mut(ndarray::s![..self.n_classes(), ..]).assign(&self.centroids);
        centroids.row_mut(self.n_classes()).assign(&c);
        let mut class_ids = self.class_ids.clone();
        class_ids.push(video_id.to_string());
        let mut shots = self.shots_per_class.clone();
        shots.push(shot_embeddings.nrows());
        Gallery::new(centroids, class_ids, shots)
    }

    /// Rebuilds the centroids of the classes present in the target
    /// embeddings; other classes and the class order are kept.
    pub fn with_replaced(&self, embeddings: ArrayView2<f64>, video_ids: &[String]) -> Result<Gallery> {
        let target = Gallery::from_embeddings(embeddings, video_ids)?;
        let mut centroids = self.centroids.clone();
        let mut shots = self.shots_per_class.clone();
        for (j, id) in target.class_ids.iter().enumerate() {
            let k = self.index_of(id).ok_or_else(|| Error::UnknownClass(id.clone()))?;
            if target.dim() != self.dim() {
                return Err(Error::Shape("target embedding dimension differs".to_string()));
            }
            centroids.row_mut(k).assign(&target.centroids.row(j));
            shots[k] = target.shots_per_class[j];
        }
        Gallery::new(centroids, self.class_ids.clone(), shots)
    }
}

fn mean_of(embeddings: ArrayView2<f64>, rows: &[usize]) -> Array1<f64> {
    let mut acc = Array1::zeros(embeddings.ncols());
    for &r in rows {
        acc += &embeddings.row(r);
    }
    acc / rows.len() as f64
}

fn argmax(s: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = k;
        }
    }
    best
}

fn embed_f64<T: Scalar>(model: &EmbeddingModel<T>, ds: &Dataset) -> Result<Array2<f64>> {
    Ok(model.embed_dataset(ds)?.mapv(|v| v.as_f64()))
}

fn video_ids(ds: &Dataset) -> Vec<String> {
    ds.samples.iter().map(|s| s.video_id.clone()).collect()
}

/// One centroid per video of `ds`, from eval-mode embeddings.
pub fn build_gallery<T: Scalar>(model: &EmbeddingModel<T>, ds: &Dataset) -> Result<Gallery> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Gallery::from_embeddings(embed_f64(model, ds)?.view(), &video_ids(ds))
}

/// Adds a new video from its shots without touching the model.
pub fn add_class<T: Scalar>(g: &Gallery, model: &EmbeddingModel<T>, shots: &[StreamSample]) -> Result<Gallery> {
    let first = shots.first().ok_or(Error::EmptyDataset)?;
    if shots.iter().any(|s| s.video_id != first.video_id) {
        return Err(Error::Invalid("shots must share one video_id".to_string()));
    }
    if g.index_of(&first.video_id).is_some() {
        return Err(Error::DuplicateClass(first.video_id.clone()));
    }
    let ds = Dataset::new(shots.to_vec());
    g.with_class(&first.video_id, embed_f64(model, &ds)?.view())
}

/// Swaps in centroids built from `target_ds` (e.g. another capture domain).
pub fn replace_centroids<T: Scalar>(g: &Gallery, model: &EmbeddingModel<T>, target_ds: &Dataset) -> Result<Gallery> {
    if let Some(unknown) = target_ds.samples.iter().find(|s| g.index_of(&s.video_id).is_none()) {
        return Err(Error::UnknownClass(unknown.video_id.clone()));
    }
    g.with_replaced(embed_f64(model, target_ds)?.view(), &video_ids(target_ds))
}

#[derive(Debug, Serialize, Deserialize)]
struct GalleryFile {
    version: String,
    class_ids: Vec<String>,
    shots_per_class: Vec<usize>,
    dim: usize,
    centroids: Vec<Vec<f64>>,
}

impl Gallery {
    pub fn to_json(&self) -> Result<String> {
        let file = GalleryFile {
            version: GALLERY_VERSION.to_string(),
            class_ids: self.class_ids.clone(),
            shots_per_class: self.shots_per_class.clone(),
            dim: self.dim(),
            centroids: self.centroids.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GalleryFile = serde_json::from_str(text)?;
        if file.version != GALLERY_VERSION {
            return Err(Error::Incompatible(format!("unsupported gallery version {}", file.version)));
        }
        if file.centroids.iter().any(|r| r.len() != file.dim) {
            return Err(Error::Shape("centroid row length differs from dim".to_string()));
        }
        let flat: Vec<f64> = file.centroids.into_iter().flatten().collect();
        let centroids = Array2::from_shape_vec((file.class_ids.len(), file.dim), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Gallery::new(centroids, file.class_ids, file.shots_per_class)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Gallery::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn midpoint_centroid() {
        let g = Gallery::from_embeddings(array![[0.0, 0.0], [2.0, 0.0]].view(), &ids(&["a", "a"])).unwrap();
        assert_eq!(g.centroids().row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(g.shots_per_class(), &[2]);
    }

    #[test]
    fn one_shot_centroid_is_the_embedding() {
        let e = array![[0.5, -1.0], [3.0, 4.0]];
        let g = Gallery::from_embeddings(e.view(), &ids(&["a", "b"])).unwrap();
        assert_eq!(g.centroids(), e.view());
    }

    #[test]
    fn score_examples() {
        let g = Gallery::from_embeddings(array![[-1.0, 0.0], [1.0, 0.0]].view(), &ids(&["a", "b"])).unwrap();
        let s = g.score(array![0.0, 3.0].view()).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);
        assert_eq!(g.confidence(array![0.0, 3.0].view()).unwrap(), 0.5);
        // exact tie goes to the lower index
        assert_eq!(g.predict(array![0.0, 3.0].view()).unwrap(), 0);

        let ln3 = 3f64.ln();
        let g = Gallery::from_embeddings(array![[0.0], [ln3]].view(), &ids(&["a", "b"])).unwrap();
        let s = g.score(array![0.0].view()).unwrap();
        assert!((s[0] - 0.75).abs() < 1e-12);
        assert!((s[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn single_class_confidence_is_one() {
        let g = Gallery::from_embeddings(array![[7.0, 7.0]].view(), &ids(&["a"])).unwrap();
        assert_eq!(g.confidence(array![1000.0, -1000.0].view()).unwrap(), 1.0);
    }

    #[test]
    fn predicts_coinciding_centroid() {
        let c = array![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let g = Gallery::from_embeddings(c.view(), &ids(&["a", "b", "c", "d"])).unwrap();
        assert_eq!(g.predict(c.row(3)).unwrap(), 3);
    }

    #[test]
    fn score_matches_scalar_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Array::from_shape_simple_fn((10, 6), || rng.random_range(-3.0..3.0));
        let g = Gallery::from_embeddings(c.view(), &(0..10).map(|i| i.to_string()).collect::<Vec<_>>()).unwrap();
        for _ in 0..50 {
            let x = Array::from_shape_simple_fn(6, || rng.random_range(-3.0..3.0));
            let s = g.score(x.view()).unwrap();
            let mut w = Vec::new();
            for k in 0..10 {
                let mut ss = 0.0;
                for j in 0..6 {
                    ss += (c[[k, j]] - x[j]) * (c[[k, j]] - x[j]);
                }
                w.push((-ss.sqrt()).exp());
            }
            let z: f64 = w.iter().sum();
            for k in 0..10 {
                assert!((s[k] - w[k] / z).abs() < 1e-9);
            }
            assert!((s.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn add_and_replace() {
        let g = Gallery::from_embeddings(array![[0.0, 0.0], [10.0, 0.0]].view(), &ids(&["a", "b"])).unwrap();
        let g2 = g.with_class("c", array![[0.0, 10.0]].view()).unwrap();
        assert_eq!(g2.n_classes(), 3);
        assert_eq!(g2.centroids().row(2).to_vec(), vec![0.0, 10.0]);
        assert_eq!(g2.centroids().slice(ndarray::s![..2, ..]), g.centroids());
        assert!(matches!(
            g.with_class("a", array![[1.0, 1.0]].view()),
            Err(Error::DuplicateClass(_))
        ));

        let g3 = g2.with_replaced(array![[1.0, 1.0]].view(), &ids(&["b"])).unwrap();
        assert_eq!(g3.class_ids(), g2.class_ids());
        assert_eq!(g3.centroids().row(1).to_vec(), vec![1.0, 1.0]);
        assert!(matches!(
            g.with_replaced(array![[1.0, 1.0]].view(), &ids(&["zzz"])),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let g = Gallery::from_embeddings(array![[0.1, 0.2], [1.0 / 3.0, 1e-12]].view(), &ids(&["a", "b"])).unwrap();
        let back = Gallery::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
        assert!(g.to_json().unwrap().contains("\"gallery/1\""));
    }
}
