use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use dashfp::backbone::EmbeddingModel;
use dashfp::baselines::{ce_train, CeClassifier, CeConfig};
use dashfp::evalx::{
    leave_out_protocol, robustness_experiment, summarize_leave_out, transfer_experiment, LeaveOutConfig, LeaveOutRun,
    LeaveOutSummary, ReportFile,
};
use dashfp::flowio::{ingest_directory, load_dataset, save_dataset, Binning, Dataset};
use dashfp::gallery::{build_gallery, Gallery};
use dashfp::metriclearn::{train as train_triplet, write_loss_log, TrainConfig};
use dashfp::synthgen::{build_benchmark, build_target, BenchmarkSpec};
use serde::Serialize;

use crate::config::{read_json, resolve, EvalFile, TrainFile, TrainKind};
use crate::manifest::RunManifest;
use crate::Protocol;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Saves a dataset and reads it back.
fn write_checked(ds: &Dataset, path: &Path) -> Result<()> {
    save_dataset(ds, path)?;
    let back = load_dataset(path)?;
    if back.len() != ds.len() {
        bail!("{}: wrote {} samples, read back {}", path.display(), ds.len(), back.len());
    }
    Ok(())
}

pub fn ingest(csv_dir: &Path, out: &Path, dns_hint: Option<&str>, seed: Option<u64>) -> Result<()> {
    let ingested = ingest_directory(csv_dir, dns_hint, &Binning::default())?;
    for w in &ingested.warnings {
        log::warn!("{w}");
    }
    write_checked(&ingested.dataset, out)?;
    log::info!("{} samples written to {}", ingested.dataset.len(), out.display());
    let mut m = RunManifest::new("ingest", None, seed.unwrap_or(0));
    m.artifact("dataset", out);
    m.write_beside(out)
}

pub fn synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: BenchmarkSpec = read_json(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let b = build_benchmark(&spec)?;
    create_dir(out)?;
    let mut m = RunManifest::new("synth", Some(config), spec.seed);
    for (name, ds) in [("train", &b.train), ("test", &b.test), ("tune", &b.tune), ("out", &b.out)] {
        let path = out.join(format!("{name}.ndjson"));
        write_checked(ds, &path)?;
        m.artifact(name, &path);
    }
    m.write_in_dir(out)
}

pub fn train(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut file: TrainFile = read_json(config)?;
    if let Some(s) = seed {
        file.seed = s;
    }
    let seed = file.seed;
    let train_ds = load_dataset(&resolve(config, &file.train_data))?;
    let tune_ds = match &file.tune_data {
        Some(p) => Some(load_dataset(&resolve(config, p))?),
        None => None,
    };
    create_dir(out)?;
    let model_path = out.join("model.json");
    let log_path = out.join("loss_log.csv");
    match file.model {
        TrainKind::Triplet => {
            let model = EmbeddingModel::<f32>::new(file.backbone.clone(), seed)?;
            let cfg = TrainConfig {
                seed,
                ..file.train.clone()
            };
            let outcome = train_triplet(model, &train_ds, &cfg, tune_ds.as_ref())?;
            outcome.model.save(&model_path)?;
            let f = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
            write_loss_log(&outcome.log, BufWriter::new(f))?;
            EmbeddingModel::<f32>::load(&model_path, Some(&file.backbone))?;
        }
        TrainKind::Ce => {
            let cfg = CeConfig { seed, ..file.ce.clone() };
            let outcome = ce_train::<f32>(&train_ds, &file.backbone, &cfg)?;
            outcome.classifier.save(&model_path)?;
            let mut w = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
            writeln!(w, "epoch,loss")?;
            for (e, l) in outcome.epoch_losses.iter().enumerate() {
                writeln!(w, "{},{l}", e + 1)?;
            }
            w.flush()?;
            CeClassifier::<f32>::load(&model_path)?;
        }
    }
    let mut m = RunManifest::new("train", Some(config), seed);
    m.artifact("model", &model_path);
    m.artifact("loss_log", &log_path);
    m.write_in_dir(out)
}

pub fn gallery(model: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let model_f = EmbeddingModel::<f32>::load(model, None)?;
    let ds = load_dataset(data)?;
    let g = build_gallery(&model_f, &ds)?;
    g.save(out)?;
    Gallery::load(out)?;
    let mut m = RunManifest::new("gallery", None, seed.unwrap_or(0));
    m.artifact("gallery", out);
    m.write_beside(out)
}

#[derive(Serialize)]
struct Prediction<'a> {
    stream_id: &'a str,
    video_id: &'a str,
    confidence: f64,
    accepted: bool,
}

pub fn predict(model: &Path, gallery: &Path, data: &Path, threshold: f64, out: &Path, seed: Option<u64>) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        bail!("threshold must be in [0, 1], got {threshold}");
    }
    let model_f = EmbeddingModel::<f32>::load(model, None)?;
    let g = Gallery::load(gallery)?;
    if g.dim() != model_f.config.embedding_dim {
        return Err(dashfp::Error::Incompatible(format!(
            "model embeds into {} dimensions, gallery holds {}",
            model_f.config.embedding_dim,
            g.dim()
        ))
        .into());
    }
    let ds = load_dataset(data)?;
    let emb = model_f.embed_dataset(&ds)?.mapv(f64::from);
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let mut rejected = 0;
    for (s, row) in ds.samples.iter().zip(emb.rows()) {
        let (k, confidence) = g.classify(row)?;
        let accepted = confidence >= threshold;
        rejected += usize::from(!accepted);
        let p = Prediction {
            stream_id: &s.stream_id,
            video_id: &g.class_ids()[k],
            confidence,
            accepted,
        };
        serde_json::to_writer(&mut w, &p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    log::info!("{rejected} of {} streams rejected as out-of-distribution", ds.len());
    let mut m = RunManifest::new("predict", None, seed.unwrap_or(0));
    m.artifact("predictions", out);
    m.write_beside(out)
}

#[derive(Serialize)]
struct LeaveOutResults {
    summary: Vec<LeaveOutSummary>,
    runs: Vec<LeaveOutRun>,
}

struct Sources {
    train: Dataset,
    test: Dataset,
    tune: Option<Dataset>,
    out: Dataset,
}

fn load_sources(file: &EvalFile, config: &Path) -> Result<Sources> {
    if let Some(spec) = &file.benchmark {
        let b = build_benchmark(spec)?;
        return Ok(Sources {
            tune: (!b.tune.is_empty()).then_some(b.tune),
            train: b.train,
            test: b.test,
            out: b.out,
        });
    }
    let paths = file.data.as_ref().expect("validated");
    let load = |p: &Path| load_dataset(&resolve(config, p));
    Ok(Sources {
        train: load(&paths.train)?,
        test: load(&paths.test)?,
        tune: paths.tune.as_deref().map(load).transpose()?,
        out: load(&paths.out)?,
    })
}

fn load_target(file: &EvalFile, config: &Path) -> Result<(Dataset, Dataset)> {
    match (&file.benchmark, &file.target_data) {
        (_, Some(p)) => Ok((
            load_dataset(&resolve(config, &p.target))?,
            load_dataset(&resolve(config, &p.out))?,
        )),
        (Some(spec), None) => Ok(build_target(spec, &file.target.clone().unwrap_or_default())?),
        (None, None) => bail!("invalid config: target_data: required for the transfer protocol with file data"),
    }
}

pub fn eval(protocol: Protocol, config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut file: EvalFile = read_json(config)?;
    if let Some(s) = seed {
        file.seed = s;
    }
    file.validate()?;
    let seeds = file.seeds();
    let src = load_sources(&file, config)?;
    let echo = serde_json::to_value(&file)?;
    let name = protocol.as_str().to_string();
    match protocol {
        Protocol::Robustness => {
            let results = robustness_experiment(
                &src.train,
                &src.test,
                src.tune.as_ref(),
                &src.out,
                &file.methods,
                &file.models,
                &seeds,
            )?;
            ReportFile { protocol: name, config: echo, results }.save(out)?;
        }
        Protocol::LeaveOut => {
            let cfg = LeaveOutConfig {
                leave_out_fraction: file.leave_out_fraction,
                shots: file.leave_out_shots.clone(),
                backbone: file.models.backbone.clone(),
                train: file.models.train.clone(),
            };
            let runs = leave_out_protocol(&src.train, &src.test, &cfg, &seeds)?;
            let results = LeaveOutResults {
                summary: summarize_leave_out(&runs)?,
                runs,
            };
            ReportFile { protocol: name, config: echo, results }.save(out)?;
        }
        Protocol::Transfer => {
            let (target, target_out) = load_target(&file, config)?;
            let results = transfer_experiment(&src.train, &target, &target_out, &file.transfer_shots, &file.models, &seeds)?;
            ReportFile { protocol: name, config: echo, results }.save(out)?;
        }
    }
    let text = std::fs::read_to_string(out).with_context(|| format!("reading back {}", out.display()))?;
    serde_json::from_str::<serde_json::Value>(&text).with_context(|| format!("{}: report is not valid JSON", out.display()))?;
    let mut m = RunManifest::new("eval", Some(config), file.seed);
    m.artifact("report", out);
    m.write_beside(out)
}
