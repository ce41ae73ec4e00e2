//! Identify which video an encrypted stream carries from its traffic volume.
//!
//! Streams are reduced to a `2 × 240` matrix of per-quarter-second byte
//! counts (incoming and outgoing), embedded by a 1D CNN trained with a
//! triplet loss, and classified against per-video centroids. The confidence
//! of the centroid softmax rejects streams of unknown videos, and new videos
//! can be added to a [`gallery::Gallery`] from a handful of streams without
//! retraining.

pub mod backbone;
pub mod baselines;
pub mod error;
pub mod evalx;
pub mod flowio;
pub mod gallery;
pub mod metriclearn;
pub mod nn;
pub mod optim;
pub mod synthgen;

pub use error::{Error, Result};
