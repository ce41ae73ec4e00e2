//! Ranking and classification metrics, run aggregation, and the
//! evaluation protocols.

mod experiments;
mod protocols;

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use experiments::{robustness_experiment, transfer_experiment, Method, MethodReport, ModelConfig, ShotReport};
pub use protocols::{
    choose_left_out, evaluate_leave_out, leave_out_protocol, summarize_leave_out, robustness_eval, split_target_shots, transfer_eval,
    transfer_protocol, Classifier, GalleryClassifier, LeaveOutConfig, LeaveOutRun, LeaveOutSummary, ShotAccuracy, TargetSplit,
    TransferConfig, TransferReport, TransferRun,
};

/// One item of a detection ranking: a correctly classified in-distribution
/// stream (positive) or an OOD stream (negative).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedDetection {
    pub score: f64,
    pub is_positive: bool,
}

impl RankedDetection {
    pub fn new(score: f64, is_positive: bool) -> Self {
        RankedDetection { score, is_positive }
    }
}

/// Fraction of equal entries.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Score descending; on equal scores negatives come first.
fn pessimistic_order(detections: &[RankedDetection]) -> Vec<RankedDetection> {
    let mut d = detections.to_vec();
    d.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| match (a.is_positive, b.is_positive) {
                (false, true) => Ordering::Less,
                (true, false) => Ordering::Greater,
                _ => Ordering::Equal,
            })
    });
    d
}

/// Mean over positives of the precision at the positive's rank.
pub fn average_precision(detections: &[RankedDetection]) -> Result<f64> {
    let ranked = pessimistic_order(detections);
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, d) in ranked.iter().enumerate() {
        if d.is_positive {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoPositives);
    }
    Ok(total / hits as f64)
}

/// Share of positives scoring strictly above every negative.
pub fn recall_at_full_precision(detections: &[RankedDetection]) -> Result<f64> {
    let n_pos = detections.iter().filter(|d| d.is_positive).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let top_negative = detections
        .iter()
        .filter(|d| !d.is_positive)
        .map(|d| d.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let above = detections
        .iter()
        .filter(|d| d.is_positive && d.score > top_negative)
        .count();
    Ok(above as f64 / n_pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(MeanStd { mean, std: var.sqrt() })
    }
}

/// Metrics of a single run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: f64,
    pub map: f64,
    pub recall_at_full_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: MeanStd,
    pub map: MeanStd,
    pub recall_at_full_precision: MeanStd,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub per_run: Vec<RunMetrics>,
}

pub fn aggregate_runs(per_run: &[RunMetrics], seeds: &[u64]) -> Result<MetricsReport> {
    if per_run.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if per_run.len() != seeds.len() {
        return Err(Error::LengthMismatch(per_run.len(), seeds.len()));
    }
    let col = |f: fn(&RunMetrics) -> f64| MeanStd::of(&per_run.iter().map(f).collect::<Vec<_>>());
    Ok(MetricsReport {
        accuracy: col(|r| r.accuracy)?,
        map: col(|r| r.map)?,
        recall_at_full_precision: col(|r| r.recall_at_full_precision)?,
        runs: per_run.len(),
        seeds: seeds.to_vec(),
        per_run: per_run.to_vec(),
    })
}

/// A report file: the results plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile<R> {
    pub protocol: String,
    pub config: serde_json::Value,
    pub results: R,
}

impl<R: Serialize> ReportFile<R> {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
