//! Flow ingestion and feature construction.
//!
//! A capture is a list of `(ts_rel, direction, bytes)` records for one flow.
//! [`bucketize`] sums the bytes per direction into fixed time bins and
//! [`standardize`] rescales each direction row to zero mean and unit
//! variance, giving the `2 × 240` matrix stored in a [`StreamSample`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView1};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of time buckets in a feature row (60 s at 0.25 s).
pub const N_BUCKETS: usize = 240;
/// Incoming and outgoing.
pub const N_DIRECTIONS: usize = 2;
pub const DEFAULT_WINDOW_S: f64 = 60.0;
pub const DEFAULT_BIN_S: f64 = 0.25;
/// Guard for rows with zero variance.
pub const STD_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "in")]
    Incoming,
    #[serde(rename = "out")]
    Outgoing,
}

impl Direction {
    pub fn row(self) -> usize {
        match self {
            Direction::Incoming => 0,
            Direction::Outgoing => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub ts_rel: f64,
    pub direction: Direction,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Capture {
    pub capture_id: String,
    pub records: Vec<FlowRecord>,
    pub flow_key: String,
    pub meta: BTreeMap<String, String>,
}

impl Capture {
    pub fn new(capture_id: impl Into<String>) -> Self {
        Capture {
            capture_id: capture_id.into(),
            ..Default::default()
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes).sum()
    }

    pub fn dns_name(&self) -> Option<&str> {
        self.meta.get("dns_name").map(String::as_str)
    }

    /// Sorts records by timestamp, keeping the original order of ties.
    pub fn sort_records(&mut self) {
        self.records.sort_by(|a, b| a.ts_rel.total_cmp(&b.ts_rel));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Tune,
    Out,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "tune" => Ok(Split::Tune),
            "out" => Ok(Split::Out),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// One stream reduced to its standardized `2 × 240` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    pub video_id: String,
    pub stream_id: String,
    pub split: Split,
    /// Row 0 incoming, row 1 outgoing.
    pub features: Array2<f32>,
}

impl StreamSample {
    pub fn new(
        video_id: impl Into<String>,
        stream_id: impl Into<String>,
        split: Split,
        features: Array2<f32>,
    ) -> Result<Self> {
        if features.dim() != (N_DIRECTIONS, N_BUCKETS) {
            let (r, c) = features.dim();
            return Err(Error::FeatureShape(format!("{r}×{c}")));
        }
        Ok(StreamSample {
            video_id: video_id.into(),
            stream_id: stream_id.into(),
            split,
            features,
        })
    }

    /// Row-major `[incoming..., outgoing...]` view of length 480.
    pub fn flat(&self) -> &[f32] {
        self.features
            .as_slice()
            .expect("features are stored in standard layout")
    }
}

/// Ordered collection of samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<StreamSample>,
}

impl Dataset {
    pub fn new(samples: Vec<StreamSample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct video ids in lexicographic order; position is the class index.
    pub fn class_ids(&self) -> Vec<String> {
        self.samples
            .iter()
            .map(|s| s.video_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn class_index(&self) -> HashMap<String, usize> {
        self.class_ids()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect()
    }

    /// Class index of every sample, aligned with `samples`.
    pub fn labels(&self) -> Vec<usize> {
        let index = self.class_index();
        self.samples.iter().map(|s| index[&s.video_id]).collect()
    }

    /// Sample indices grouped by video id, in sample order.
    pub fn indices_by_class(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            groups.entry(s.video_id.clone()).or_default().push(i);
        }
        groups
    }

    pub fn with_split(&self, split: Split) -> Dataset {
        self.filter(|s| s.split == split)
    }

    pub fn filter(&self, mut keep: impl FnMut(&StreamSample) -> bool) -> Dataset {
        Dataset::new(self.samples.iter().filter(|s| keep(s)).cloned().collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn extend(&mut self, other: Dataset) {
        self.samples.extend(other.samples);
    }

    /// Stacks the selected samples into a `B × 2 × 240` tensor.
    pub fn batch<T: Float + FromPrimitive>(&self, indices: &[usize]) -> Array3<T> {
        let mut out = Array3::<T>::zeros((indices.len(), N_DIRECTIONS, N_BUCKETS));
        for (b, &i) in indices.iter().enumerate() {
            let src = &self.samples[i].features;
            out.index_axis_mut(ndarray::Axis(0), b)
                .zip_mut_with(src, |d, &s| *d = T::from_f32(s).unwrap());
        }
        out
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Outcome of [`select_video_flow`].
#[derive(Debug, Clone, Copy)]
pub struct FlowSelection<'a> {
    pub capture: &'a Capture,
    /// Set when a DNS hint was given but no capture matched it.
    pub warning: Option<&'static str>,
}

/// Picks the flow carrying the video among all flows of one recording.
///
/// A capture whose `dns_name` equals the hint wins. Otherwise the capture
/// with the most bytes is chosen, ties going to the lexicographically first
/// `capture_id`.
pub fn select_video_flow<'a>(
    captures: &'a [Capture],
    dns_hint: Option<&str>,
) -> Result<FlowSelection<'a>> {
    if captures.is_empty() {
        return Err(Error::NoFlows);
    }
    let mut warning = None;
    if let Some(hint) = dns_hint {
        if let Some(c) = captures
            .iter()
            .filter(|c| c.dns_name() == Some(hint))
            .min_by(|a, b| a.capture_id.cmp(&b.capture_id))
        {
            return Ok(FlowSelection {
                capture: c,
                warning: None,
            });
        }
        warning = Some("dns hint unmatched, fell back to byte volume");
    }
    let capture = captures
        .iter()
        .max_by(|a, b| {
            a.total_bytes()
                .cmp(&b.total_bytes())
                .then_with(|| b.capture_id.cmp(&a.capture_id))
        })
        .expect("non-empty");
    Ok(FlowSelection { capture, warning })
}

/// Where bucket 0 starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketOrigin {
    /// `ts_rel = 0`, the start of the capture.
    #[default]
    CaptureStart,
    /// The earliest record of the capture.
    FirstRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub window_s: f64,
    pub bin_s: f64,
    #[serde(default)]
    pub origin: BucketOrigin,
}

impl Default for Binning {
    fn default() -> Self {
        Binning {
            window_s: DEFAULT_WINDOW_S,
            bin_s: DEFAULT_BIN_S,
            origin: BucketOrigin::CaptureStart,
        }
    }
}

impl Binning {
    pub fn n_buckets(&self) -> Result<usize> {
        let invalid = || Error::InvalidBinning {
            window_s: self.window_s,
            bin_s: self.bin_s,
        };
        if !(self.window_s > 0.0 && self.bin_s > 0.0) {
            return Err(invalid());
        }
        let ratio = self.window_s / self.bin_s;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * n.max(1.0) {
            return Err(invalid());
        }
        Ok(n as usize)
    }
}

/// Sums record bytes per direction into `window_s / bin_s` buckets.
///
/// Records at or beyond `window_s` (relative to the origin) are dropped.
pub fn bucketize(capture: &Capture, binning: &Binning) -> Result<Array2<u64>> {
    let n = binning.n_buckets()?;
    let mut out = Array2::<u64>::zeros((N_DIRECTIONS, n));
    let origin = match binning.origin {
        BucketOrigin::CaptureStart => 0.0,
        BucketOrigin::FirstRecord => capture
            .records
            .iter()
            .map(|r| r.ts_rel)
            .fold(f64::INFINITY, f64::min),
    };
    for r in &capture.records {
        let t = r.ts_rel - origin;
        if !(t >= 0.0 && t < binning.window_s) {
            continue;
        }
        let k = ((t / binning.bin_s).floor() as usize).min(n - 1);
        out[[r.direction.row(), k]] += r.bytes;
    }
    Ok(out)
}

/// Rescales each row to zero mean and unit (population) standard deviation.
/// Rows with standard deviation below [`STD_EPSILON`] become all zeros.
pub fn standardize(raw: &Array2<f64>) -> Array2<f64> {
    let mut out = raw.clone();
    for mut row in out.rows_mut() {
        let (mean, std) = row_moments(row.view());
        if std < STD_EPSILON {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|x| (x - mean) / std);
        }
    }
    out
}

fn row_moments(row: ArrayView1<f64>) -> (f64, f64) {
    let n = row.len() as f64;
    if row.is_empty() {
        return (0.0, 0.0);
    }
    let mean = row.sum() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Bucketizes and standardizes one capture into `f32` features.
pub fn features_from_capture(capture: &Capture, binning: &Binning) -> Result<Array2<f32>> {
    let raw = bucketize(capture, binning)?.mapv(|v| v as f64);
    Ok(standardize(&raw).mapv(|v| v as f32))
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleLine {
    video_id: String,
    stream_id: String,
    split: Split,
    incoming: Vec<f32>,
    outgoing: Vec<f32>,
}

impl From<&StreamSample> for SampleLine {
    fn from(s: &StreamSample) -> Self {
        SampleLine {
            video_id: s.video_id.clone(),
            stream_id: s.stream_id.clone(),
            split: s.split,
            incoming: s.features.row(0).to_vec(),
            outgoing: s.features.row(1).to_vec(),
        }
    }
}

impl SampleLine {
    fn into_sample(self) -> Result<StreamSample> {
        if self.incoming.len() != N_BUCKETS || self.outgoing.len() != N_BUCKETS {
            return Err(Error::FeatureShape(format!(
                "2 rows of {} and {}",
                self.incoming.len(),
                self.outgoing.len()
            )));
        }
        let mut flat = self.incoming;
        flat.extend(self.outgoing);
        let features = Array2::from_shape_vec((N_DIRECTIONS, N_BUCKETS), flat)
            .expect("length checked above");
        StreamSample::new(self.video_id, self.stream_id, self.split, features)
    }
}

/// Writes one JSON object per sample. Features are written as the shortest
/// decimal that parses back to the same `f32`.
pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    for s in &ds.samples {
        serde_json::to_writer(&mut w, &SampleLine::from(s))?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let sample = parsed.into_sample().map_err(|e| match e {
            Error::FeatureShape(_) => Error::Parse {
                line: line_no,
                message: "expected 2×240".to_string(),
            },
            other => other,
        })?;
        samples.push(sample);
    }
    Ok(Dataset::new(samples))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    ts_rel: f64,
    direction: Direction,
    bytes: u64,
}

/// Optional JSON sidecar next to a capture CSV (`<stem>.json`).
///
/// Only `capture_id`, `dns_name` and `flow_key` describe the flow itself;
/// the remaining fields label the resulting sample during ingestion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptureSidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dns_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_id: Option<String>,
    /// Captures sharing a recording id are flows of the same recording.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

pub fn read_capture_records<R: std::io::Read>(r: R) -> Result<Vec<FlowRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["ts_rel", "direction", "bytes"] {
        return Err(Error::Parse {
            line: 1,
            message: "expected header ts_rel,direction,bytes".to_string(),
        });
    }
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if !(row.ts_rel >= 0.0 && row.ts_rel.is_finite()) {
            return Err(Error::Parse {
                line,
                message: format!("ts_rel must be non-negative, got {}", row.ts_rel),
            });
        }
        records.push(FlowRecord {
            ts_rel: row.ts_rel,
            direction: row.direction,
            bytes: row.bytes,
        });
    }
    Ok(records)
}

pub fn write_capture_records<W: Write>(records: &[FlowRecord], w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for r in records {
        writer.serialize(CsvRow {
            ts_rel: r.ts_rel,
            direction: r.direction,
            bytes: r.bytes,
        })?;
    }
    writer.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}

/// Reads `<path>` and its optional `<stem>.json` sidecar.
pub fn read_capture_file(path: &Path) -> Result<(Capture, CaptureSidecar)> {
    let file_err = |message: String| Error::File {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let records = read_capture_records(BufReader::new(file)).map_err(|e| file_err(e.to_string()))?;
    let sidecar_path = path.with_extension("json");
    let sidecar: CaptureSidecar = if sidecar_path.exists() {
        let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::File {
            path: sidecar_path.clone(),
            message: e.to_string(),
        })?
    } else {
        CaptureSidecar::default()
    };
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut capture = Capture::new(sidecar.capture_id.clone().unwrap_or(stem));
    capture.records = records;
    capture.sort_records();
    capture.flow_key = sidecar.flow_key.clone().unwrap_or_default();
    if let Some(dns) = &sidecar.dns_name {
        capture.meta.insert("dns_name".to_string(), dns.clone());
    }
    Ok((capture, sidecar))
}

/// Result of [`ingest_directory`].
#[derive(Debug, Default)]
pub struct Ingested {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

/// Turns a directory of capture CSVs into a dataset, one sample per
/// recording. Files are visited in name order; the first unreadable file
/// aborts the whole ingestion with its path in the error.
pub fn ingest_directory(dir: &Path, dns_hint: Option<&str>, binning: &Binning) -> Result<Ingested> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();

    let mut out = Ingested::default();
    if paths.is_empty() {
        out.warnings
            .push(format!("{}: no capture files found", dir.display()));
        return Ok(out);
    }

    let mut recordings: BTreeMap<String, Vec<(Capture, CaptureSidecar)>> = BTreeMap::new();
    let mut seen_ids = BTreeSet::new();
    for path in &paths {
        let (capture, sidecar) = read_capture_file(path)?;
        if capture.capture_id.is_empty() || !seen_ids.insert(capture.capture_id.clone()) {
            return Err(Error::File {
                path: path.clone(),
                message: format!("capture_id {:?} empty or duplicated", capture.capture_id),
            });
        }
        let recording = sidecar
            .recording_id
            .clone()
            .unwrap_or_else(|| capture.capture_id.clone());
        recordings.entry(recording).or_default().push((capture, sidecar));
    }

    for (recording, flows) in recordings {
        let captures: Vec<Capture> = flows.iter().map(|(c, _)| c.clone()).collect();
        let selection = select_video_flow(&captures, dns_hint)?;
        if let Some(w) = selection.warning {
            out.warnings.push(format!("{recording}: {w}"));
        }
        let sidecar = &flows
            .iter()
            .find(|(c, _)| c.capture_id == selection.capture.capture_id)
            .expect("selected capture comes from this recording")
            .1;
        let video_id = match &sidecar.video_id {
            Some(v) => v.clone(),
            None => {
                out.warnings
                    .push(format!("{recording}: no video_id in sidecar, labelled \"unknown\""));
                "unknown".to_string()
            }
        };
        let features = features_from_capture(selection.capture, binning)?;
        out.dataset.samples.push(StreamSample::new(
            video_id,
            sidecar.stream_id.clone().unwrap_or_else(|| recording.clone()),
            sidecar.split.unwrap_or(Split::Test),
            features,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn capture_with(id: &str, total: u64) -> Capture {
        let mut c = Capture::new(id);
        c.records.push(FlowRecord {
            ts_rel: 1.0,
            direction: Direction::Incoming,
            bytes: total,
        });
        c
    }

    #[test]
    fn selects_hinted_capture() {
        let mut a = capture_with("a", 10);
        let b = capture_with("b", 4_000_000);
        a.meta.insert("dns_name".into(), "rr1.googlevideo.com".into());
        let caps = [a, b];
        let sel = select_video_flow(&caps, Some("rr1.googlevideo.com")).unwrap();
        assert_eq!(sel.capture.capture_id, "a");
        assert!(sel.warning.is_none());
    }

    #[test]
    fn falls_back_to_max_bytes() {
        let caps = [capture_with("small", 10_000), capture_with("big", 4_000_000)];
        let sel = select_video_flow(&caps, None).unwrap();
        assert_eq!(sel.capture.capture_id, "big");

        let sel = select_video_flow(&caps, Some("nothing.example")).unwrap();
        assert_eq!(sel.capture.capture_id, "big");
        assert!(sel.warning.is_some());
    }

    #[test]
    fn empty_selection_is_an_error() {
        assert!(matches!(select_video_flow(&[], None), Err(Error::NoFlows)));
    }

    #[test]
    fn ties_go_to_first_capture_id() {
        let caps = [capture_with("c", 5), capture_with("a", 5), capture_with("b", 5)];
        assert_eq!(select_video_flow(&caps, None).unwrap().capture.capture_id, "a");
    }

    #[test]
    fn max_bytes_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let caps: Vec<Capture> = (0..5)
                .map(|i| capture_with(&format!("cap{i}"), rng.random_range(0..1_000_000)))
                .collect();
            let mut best = 0;
            for i in 1..caps.len() {
                if caps[i].total_bytes() > caps[best].total_bytes() {
                    best = i;
                }
            }
            let sel = select_video_flow(&caps, None).unwrap();
            assert_eq!(sel.capture.capture_id, caps[best].capture_id);
        }
    }

    #[test]
    fn empty_capture_buckets_to_zeros() {
        let m = bucketize(&Capture::new("x"), &Binning::default()).unwrap();
        assert_eq!(m.dim(), (2, 240));
        assert!(m.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_record_lands_in_bucket_one() {
        let mut c = Capture::new("x");
        c.records.push(FlowRecord {
            ts_rel: 0.30,
            direction: Direction::Incoming,
            bytes: 700,
        });
        let m = bucketize(&c, &Binning::default()).unwrap();
        assert_eq!(m[[0, 1]], 700);
        assert_eq!(m.sum(), 700);
    }

    #[test]
    fn first_record_origin_shifts_buckets() {
        let mut c = Capture::new("x");
        c.records.push(FlowRecord {
            ts_rel: 10.30,
            direction: Direction::Outgoing,
            bytes: 5,
        });
        let binning = Binning {
            origin: BucketOrigin::FirstRecord,
            ..Binning::default()
        };
        let m = bucketize(&c, &binning).unwrap();
        assert_eq!(m[[1, 0]], 5);
    }

    #[test]
    fn records_past_window_are_dropped() {
        let mut c = Capture::new("x");
        for (ts, b) in [(59.99, 1), (60.0, 10), (75.0, 100)] {
            c.records.push(FlowRecord {
                ts_rel: ts,
                direction: Direction::Outgoing,
                bytes: b,
            });
        }
        let m = bucketize(&c, &Binning::default()).unwrap();
        assert_eq!(m[[1, 239]], 1);
        assert_eq!(m.sum(), 1);
    }

    #[test]
    fn rejects_non_integer_binning() {
        let b = Binning {
            window_s: 60.0,
            bin_s: 0.7,
            origin: BucketOrigin::CaptureStart,
        };
        assert!(matches!(bucketize(&Capture::new("x"), &b), Err(Error::InvalidBinning { .. })));
        let b = Binning {
            window_s: 10.0,
            bin_s: 0.5,
            origin: BucketOrigin::CaptureStart,
        };
        assert_eq!(bucketize(&Capture::new("x"), &b).unwrap().dim(), (2, 20));
    }

    #[test]
    fn bucketize_conserves_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = Capture::new("x");
        for _ in 0..1000 {
            c.records.push(FlowRecord {
                ts_rel: rng.random_range(0.0..70.0),
                direction: if rng.random_bool(0.5) {
                    Direction::Incoming
                } else {
                    Direction::Outgoing
                },
                bytes: rng.random_range(0..20_000),
            });
        }
        let m = bucketize(&c, &Binning::default()).unwrap();
        let mut expect = [0u64; 2];
        for r in &c.records {
            if r.ts_rel < 60.0 {
                expect[r.direction.row()] += r.bytes;
            }
        }
        assert_eq!(m.row(0).sum(), expect[0]);
        assert_eq!(m.row(1).sum(), expect[1]);
    }

    #[test]
    fn constant_row_standardizes_to_zeros() {
        let raw = Array2::from_elem((2, 240), 1234.0);
        assert!(standardize(&raw).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alternating_row_scales_to_unit() {
        let raw = Array2::from_shape_fn((2, 240), |(_, j)| if j % 2 == 0 { 1.0 } else { -1.0 });
        let z = standardize(&raw);
        // Mean is already 0 and population std is 1.
        assert_eq!(z, raw);
        let raw3 = raw.mapv(|v| 3.0 * v + 7.0);
        let z3 = standardize(&raw3);
        for (a, b) in z3.iter().zip(raw.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardized_moments_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = Array2::from_shape_fn((2, 240), |_| rng.random_range(0.0..1e6));
        let z = standardize(&raw);
        for row in z.rows() {
            let n = row.len() as f64;
            let mut sum = 0.0;
            for &v in row {
                sum += v;
            }
            let mean = sum / n;
            let mut ss = 0.0;
            for &v in row {
                ss += (v - mean) * (v - mean);
            }
            assert!(mean.abs() < 1e-9);
            assert!(((ss / n).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dataset_line_errors_name_the_line() {
        let good = SampleLine {
            video_id: "v".into(),
            stream_id: "s".into(),
            split: Split::Train,
            incoming: vec![0.0; 240],
            outgoing: vec![0.0; 240],
        };
        let mut text = serde_json::to_string(&good).unwrap();
        text.push_str("\n{not json}\n");
        let err = read_dataset(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let short = SampleLine {
            incoming: vec![0.0; 239],
            ..good
        };
        let text = serde_json::to_string(&short).unwrap();
        let err = read_dataset(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("expected 2×240"), "{err}");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(read_dataset(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn csv_records_parse() {
        let text = "ts_rel,direction,bytes\n0.5,in,1200\n0.1,out,400\n";
        let recs = read_capture_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].direction, Direction::Outgoing);
        assert!(read_capture_records("ts,dir,b\n".as_bytes()).is_err());
        assert!(read_capture_records("ts_rel,direction,bytes\n-1,in,5\n".as_bytes()).is_err());
        assert!(read_capture_records("ts_rel,direction,bytes\n1,sideways,5\n".as_bytes()).is_err());
    }
}
