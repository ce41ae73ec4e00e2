//! Comparison systems: a raw-feature kNN and a cross-entropy CNN classifier.

mod ce;
mod knn;

pub use ce::{ce_score, ce_train, cross_entropy, CeClassifier, CeConfig, CeOutcome};
pub use knn::{flat_features, knn_fit, knn_predict, KnnModel, DEFAULT_K_CANDIDATES, FEATURE_LEN};
