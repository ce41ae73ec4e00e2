//! Seeded generator of MPEG-DASH-like captures.
//!
//! Every video gets a fixed sequence of segment sizes. A stream of that
//! video downloads the segments as bursts of incoming records, each preceded
//! by a small outgoing request, first back to back while the player buffers
//! and then one segment per period. [`NoiseConfig`] perturbs timing and
//! sizes per stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowio::{features_from_capture, Binning, Capture, Dataset, Direction, FlowRecord, Split, StreamSample};

/// Bytes of each outgoing segment request.
pub const REQUEST_BYTES: u64 = 400;
/// Granularity of incoming records within a burst.
const CHUNK_S: f64 = 0.05;
/// Delay between a request and the first response bytes.
const RESPONSE_DELAY_S: f64 = 0.02;
const CAPTURE_S: f64 = 60.0;
/// Playback duration of one segment, shared by all videos.
pub const SEGMENT_S: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoProfile {
    pub video_id: String,
    /// Bytes per segment, in playback order.
    pub segment_sizes: Vec<f64>,
    pub segment_period_s: f64,
    pub seed: u64,
}

/// How the player fetches segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BurstShape {
    /// Four-segment startup burst, then one fast download per period.
    #[default]
    Single,
    /// Two-segment startup, then pairs of segments every two periods over a
    /// slower link. Stands in for a different player implementation.
    Paired,
}

impl BurstShape {
    fn startup_segments(self) -> usize {
        match self {
            BurstShape::Single => 4,
            BurstShape::Paired => 2,
        }
    }

    fn throughput_bps(self) -> f64 {
        match self {
            BurstShape::Single => 4.0e6,
            BurstShape::Paired => 1.5e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Standard deviation of per-segment request time jitter.
    pub timing_jitter_s: f64,
    /// Log-scale standard deviation of multiplicative, mean-preserving size noise.
    pub size_noise_frac: f64,
    /// Probability that a segment arrives in two parts split across buckets.
    pub drop_prob: f64,
    /// Playback starts uniformly within `[0, start_delay_max_s]`.
    pub start_delay_max_s: f64,
    pub burst_shape: BurstShape,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::none()
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            timing_jitter_s: 0.0,
            size_noise_frac: 0.0,
            drop_prob: 0.0,
            start_delay_max_s: 0.0,
            burst_shape: BurstShape::Single,
        }
    }

    /// The noise level used for the desk-scale benchmarks.
    pub fn moderate() -> Self {
        NoiseConfig {
            timing_jitter_s: 0.1,
            size_noise_frac: 0.15,
            drop_prob: 0.1,
            start_delay_max_s: 1.0,
            burst_shape: BurstShape::Single,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timing_jitter_s >= 0.0 && self.timing_jitter_s.is_finite()) {
            return Err(Error::config("noise.timing_jitter_s", "must be non-negative"));
        }
        if !(self.size_noise_frac >= 0.0 && self.size_noise_frac.is_finite()) {
            return Err(Error::config("noise.size_noise_frac", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::config("noise.drop_prob", "must be in [0, 1]"));
        }
        if !(self.start_delay_max_s >= 0.0 && self.start_delay_max_s.is_finite()) {
            return Err(Error::config("noise.start_delay_max_s", "must be non-negative"));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; derives independent seeds from `(a, b)`.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn make_profile(seed: u64, index: usize) -> VideoProfile {
    let pseed = mix_seed(seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(pseed);
    let mu: f64 = rng.random_range(11.0..13.0);
    let sigma: f64 = rng.random_range(0.25..0.7);
    let period = SEGMENT_S;
    let n_segments = (CAPTURE_S / period).ceil() as usize + BurstShape::Single.startup_segments() + 4;
    let dist = LogNormal::new(mu, sigma).expect("valid lognormal");
    let segment_sizes = (0..n_segments).map(|_| dist.sample(&mut rng).max(1.0)).collect();
    VideoProfile {
        video_id: format!("s{seed}-v{index:05}"),
        segment_sizes,
        segment_period_s: period,
        seed: pseed,
    }
}

/// `n_videos` distinct profiles, a pure function of `(n_videos, seed)`.
pub fn make_profiles(n_videos: usize, seed: u64) -> Result<Vec<VideoProfile>> {
    if n_videos < 1 {
        return Err(Error::config("n_videos", "must be at least 1"));
    }
    Ok((0..n_videos).map(|i| make_profile(seed, i)).collect())
}

/// One capture of `profile`; deterministic in `(profile, noise, stream_seed)`.
pub fn synthesize_stream(profile: &VideoProfile, noise: &NoiseConfig, stream_seed: u64) -> Capture {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(profile.seed, stream_seed));
    let shape = noise.burst_shape;
    let rate = shape.throughput_bps();
    let startup = shape.startup_segments();
    let jitter = (noise.timing_jitter_s > 0.0).then(|| Normal::new(0.0, noise.timing_jitter_s).expect("valid normal"));
    let size_noise = (noise.size_noise_frac > 0.0).then(|| {
        let s = noise.size_noise_frac;
        LogNormal::new(-0.5 * s * s, s).expect("valid lognormal")
    });

    let start = if noise.start_delay_max_s > 0.0 {
        rng.random_range(0.0..=noise.start_delay_max_s)
    } else {
        0.0
    };

    // Requests: (time, byte count) with one entry per HTTP request.
    let sizes: Vec<f64> = profile
        .segment_sizes
        .iter()
        .map(|&s| size_noise.map_or(s, |d| s * d.sample(&mut rng)))
        .collect();
    let mut requests: Vec<(f64, f64)> = Vec::new();
    let mut t = start;
    let mut i = 0;
    while i < sizes.len() && i < startup {
        requests.push((t, sizes[i]));
        t += sizes[i] / rate + RESPONSE_DELAY_S;
        i += 1;
    }
    let per_request = match shape {
        BurstShape::Single => 1,
        BurstShape::Paired => 2,
    };
    let steady_start = t;
    let mut k = 0;
    while i < sizes.len() {
        let bytes: f64 = sizes[i..(i + per_request).min(sizes.len())].iter().sum();
        let when = steady_start + k as f64 * per_request as f64 * profile.segment_period_s;
        if when >= CAPTURE_S {
            break;
        }
        requests.push((when, bytes));
        i += per_request;
        k += 1;
    }

    let mut capture = Capture::new(format!("{}-{stream_seed}", profile.video_id));
    capture.flow_key = format!("synthetic:{}", profile.video_id);
    capture.meta.insert("dns_name".to_string(), "video.synthetic.invalid".to_string());
    for (when, bytes) in requests {
        let when = (when + jitter.map_or(0.0, |d| d.sample(&mut rng))).max(0.0);
        capture.records.push(FlowRecord {
            ts_rel: when,
            direction: Direction::Outgoing,
            bytes: REQUEST_BYTES,
        });
        let total = bytes.round().max(1.0) as u64;
        if noise.drop_prob > 0.0 && rng.random_bool(noise.drop_prob) {
            let first = total / 2;
            let gap = rng.random_range(0.25..0.5);
            push_burst(&mut capture.records, when + RESPONSE_DELAY_S, first, rate);
            push_burst(&mut capture.records, when + RESPONSE_DELAY_S + gap, total - first, rate);
        } else {
            push_burst(&mut capture.records, when + RESPONSE_DELAY_S, total, rate);
        }
    }
    capture.sort_records();
    capture
}

/// Incoming records of `total` bytes at `rate` bytes/s, one per chunk.
fn push_burst(records: &mut Vec<FlowRecord>, start: f64, total: u64, rate: f64) {
    let per_chunk = ((rate * CHUNK_S) as u64).max(1);
    let mut left = total;
    let mut t = start;
    while left > 0 {
        let b = left.min(per_chunk);
        records.push(FlowRecord {
            ts_rel: t,
            direction: Direction::Incoming,
            bytes: b,
        });
        left -= b;
        t += CHUNK_S;
    }
}

/// One sample per `(profile, stream)` with stream seeds `seed_base + j`.
pub fn synthesize_samples(
    profiles: &[VideoProfile],
    noise: &NoiseConfig,
    streams_per_video: usize,
    seed_base: u64,
    split_of: impl Fn(usize) -> Split,
) -> Result<Dataset> {
    let binning = Binning::default();
    let mut samples = Vec::with_capacity(profiles.len() * streams_per_video);
    for p in profiles {
        for j in 0..streams_per_video {
            let stream_seed = seed_base + j as u64;
            let capture = synthesize_stream(p, noise, stream_seed);
            let features = features_from_capture(&capture, &binning)?;
            samples.push(StreamSample::new(
                p.video_id.clone(),
                format!("{}-s{stream_seed:04}", p.video_id),
                split_of(j),
                features,
            )?);
        }
    }
    Ok(Dataset::new(samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub n_train_videos: usize,
    pub streams_per_video: usize,
    /// Share of each video's streams placed in the test split.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub n_tune: usize,
    #[serde(default)]
    pub n_out: usize,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl BenchmarkSpec {
    /// 20 videos × 100 streams, 80/20 split.
    pub fn small_mirror(noise: NoiseConfig, seed: u64) -> Self {
        BenchmarkSpec {
            n_train_videos: 20,
            streams_per_video: 100,
            test_fraction: 0.2,
            n_tune: 0,
            n_out: 0,
            noise,
            seed,
        }
    }

    pub fn test_streams_per_video(&self) -> usize {
        (self.streams_per_video as f64 * self.test_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction", "must be in [0, 1)"));
        }
        if self.test_fraction > 0.0 && self.n_train_videos > 0 {
            if self.streams_per_video < 2 {
                return Err(Error::config("streams_per_video", "need at least 2 streams for a test split"));
            }
            let n_test = self.test_streams_per_video();
            if n_test == 0 || n_test >= self.streams_per_video {
                return Err(Error::config("test_fraction", "leaves an empty train or test split"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Dataset,
    pub test: Dataset,
    pub tune: Dataset,
    pub out: Dataset,
    /// Profiles of the train/test videos.
    pub profiles: Vec<VideoProfile>,
}

/// Generates disjoint train/test, tune and out video sets. Tune and out
/// videos have one stream each.
pub fn build_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let total = spec.n_train_videos + spec.n_tune + spec.n_out;
    let all: Vec<VideoProfile> = (0..total).map(|i| make_profile(spec.seed, i)).collect();
    let (main, rest) = all.split_at(spec.n_train_videos);
    let (tune_p, out_p) = rest.split_at(spec.n_tune);

    let n_train = spec.streams_per_video - spec.test_streams_per_video();
    let both = synthesize_samples(main, &spec.noise, spec.streams_per_video, 0, |j| {
        if j < n_train {
            Split::Train
        } else {
            Split::Test
        }
    })?;
    Ok(Benchmark {
        train: both.with_split(Split::Train),
        test: both.with_split(Split::Test),
        tune: synthesize_samples(tune_p, &spec.noise, 1, 0, |_| Split::Tune)?,
        out: synthesize_samples(out_p, &spec.noise, 1, 0, |_| Split::Out)?,
        profiles: main.to_vec(),
    })
}

/// A shifted capture domain for the videos of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSpec {
    pub noise: NoiseConfig,
    pub streams_per_video: usize,
    /// OOD videos captured in the target domain.
    pub n_out: usize,
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec {
            noise: NoiseConfig {
                burst_shape: BurstShape::Paired,
                ..NoiseConfig::moderate()
            },
            streams_per_video: 20,
            n_out: 500,
        }
    }
}

/// Stream seeds of target captures start here, away from source streams.
const TARGET_SEED_BASE: u64 = 1_000_000;

/// `(target, target_out)`: the benchmark's train videos and `n_out` fresh
/// videos, captured under the target noise.
pub fn build_target(spec: &BenchmarkSpec, target: &TargetSpec) -> Result<(Dataset, Dataset)> {
    target.noise.validate()?;
    if target.streams_per_video < 1 {
        return Err(Error::config("target.streams_per_video", "must be at least 1"));
    }
    let used = spec.n_train_videos + spec.n_tune + spec.n_out;
    let videos: Vec<VideoProfile> = (0..spec.n_train_videos).map(|i| make_profile(spec.seed, i)).collect();
    let out: Vec<VideoProfile> = (used..used + target.n_out).map(|i| make_profile(spec.seed, i)).collect();
    Ok((
        synthesize_samples(&videos, &target.noise, target.streams_per_video, TARGET_SEED_BASE, |_| Split::Test)?,
        synthesize_samples(&out, &target.noise, 1, TARGET_SEED_BASE, |_| Split::Out)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowio::bucketize;
    use std::collections::BTreeSet;

    #[test]
    fn profiles_are_deterministic() {
        assert_eq!(make_profiles(1, 7).unwrap(), make_profiles(1, 7).unwrap());
        assert!(make_profiles(0, 7).is_err());
    }

    #[test]
    fn profiles_are_distinct() {
        let p = make_profiles(20, 7).unwrap();
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                assert_ne!(p[i].segment_sizes, p[j].segment_sizes);
            }
        }
    }

    #[test]
    fn many_profiles_have_unique_ids() {
        let p = make_profiles(1087, 3).unwrap();
        let ids: BTreeSet<&str> = p.iter().map(|p| p.video_id.as_str()).collect();
        assert_eq!(ids.len(), 1087);
        for prof in &p {
            assert!(prof.segment_sizes.len() as f64 >= (60.0 / prof.segment_period_s).ceil());
        }
    }

    #[test]
    fn noise_free_streams_repeat_exactly() {
        let p = make_profiles(2, 1).unwrap();
        let b = Binning::default();
        let a0 = bucketize(&synthesize_stream(&p[0], &NoiseConfig::none(), 1), &b).unwrap();
        let a1 = bucketize(&synthesize_stream(&p[0], &NoiseConfig::none(), 2), &b).unwrap();
        let b0 = bucketize(&synthesize_stream(&p[1], &NoiseConfig::none(), 1), &b).unwrap();
        assert_eq!(a0, a1);
        assert_ne!(a0, b0);
    }

    #[test]
    fn streams_have_requests_before_bursts() {
        let p = make_profiles(1, 4).unwrap();
        let c = synthesize_stream(&p[0], &NoiseConfig::moderate(), 0);
        let first_out = c.records.iter().position(|r| r.direction == Direction::Outgoing).unwrap();
        let first_in = c.records.iter().position(|r| r.direction == Direction::Incoming).unwrap();
        assert!(first_out < first_in);
        assert!(c.records.windows(2).all(|w| w[0].ts_rel <= w[1].ts_rel));
    }

    #[test]
    fn size_noise_preserves_mean_volume() {
        let p = &make_profiles(1, 12).unwrap()[0];
        let sigma = 0.2;
        let noisy = NoiseConfig {
            size_noise_frac: sigma,
            ..NoiseConfig::none()
        };
        let incoming = |c: &Capture| -> f64 {
            c.records
                .iter()
                .filter(|r| r.direction == Direction::Incoming)
                .map(|r| r.bytes as f64)
                .sum()
        };
        let clean = incoming(&synthesize_stream(p, &NoiseConfig::none(), 0));
        let n = 20;
        let mean = (0..n).map(|s| incoming(&synthesize_stream(p, &noisy, s))).sum::<f64>() / n as f64;
        // each stream total is a sum of unit-mean factors, so its relative sd
        // is at most sqrt(exp(σ²) − 1)
        let rel_sd = ((sigma * sigma).exp() - 1.0).sqrt();
        let bound = 3.0 * clean * rel_sd / (n as f64).sqrt();
        assert!((mean - clean).abs() <= bound, "mean {mean} clean {clean} bound {bound}");
    }

    #[test]
    fn small_mirror_split_sizes() {
        let spec = BenchmarkSpec {
            n_tune: 3,
            n_out: 0,
            ..BenchmarkSpec::small_mirror(NoiseConfig::moderate(), 1)
        };
        let b = build_benchmark(&spec).unwrap();
        assert_eq!(b.train.len(), 1600);
        assert_eq!(b.test.len(), 400);
        assert_eq!(b.tune.len(), 3);
        assert!(b.out.is_empty());
        let train_ids: BTreeSet<String> = b.train.class_ids().into_iter().collect();
        let tune_ids: BTreeSet<String> = b.tune.class_ids().into_iter().collect();
        assert!(train_ids.is_disjoint(&tune_ids));
    }

    #[test]
    fn large_mirror_split_counts() {
        let spec = BenchmarkSpec {
            n_train_videos: 1087,
            streams_per_video: 10,
            test_fraction: 0.2,
            n_tune: 0,
            n_out: 0,
            noise: NoiseConfig::none(),
            seed: 0,
        };
        assert_eq!(spec.test_streams_per_video(), 2);
        assert_eq!(1087 * (10 - spec.test_streams_per_video()), 8696);
        assert_eq!(1087 * spec.test_streams_per_video(), 2174);
    }

    #[test]
    fn target_domain_shares_videos_but_not_ood() {
        let spec = BenchmarkSpec {
            n_train_videos: 3,
            streams_per_video: 5,
            test_fraction: 0.2,
            n_tune: 2,
            n_out: 2,
            noise: NoiseConfig::moderate(),
            seed: 4,
        };
        let b = build_benchmark(&spec).unwrap();
        let t = TargetSpec {
            streams_per_video: 4,
            n_out: 3,
            ..TargetSpec::default()
        };
        let (target, out) = build_target(&spec, &t).unwrap();
        assert_eq!(target.class_ids(), b.train.class_ids());
        assert_eq!(target.len(), 12);
        let seen: BTreeSet<String> = [&b.train, &b.tune, &b.out].iter().flat_map(|d| d.class_ids()).collect();
        assert_eq!(out.len(), 3);
        assert!(out.class_ids().iter().all(|id| !seen.contains(id)));
    }

    #[test]
    fn inconsistent_spec_is_rejected() {
        let spec = BenchmarkSpec {
            n_train_videos: 3,
            streams_per_video: 1,
            test_fraction: 0.2,
            n_tune: 0,
            n_out: 0,
            noise: NoiseConfig::none(),
            seed: 0,
        };
        assert!(build_benchmark(&spec).is_err());
    }
}
