mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "dashfp", version, about = "Identify videos from encrypted stream traffic volumes")]
struct Cli {
    /// Seed for every random choice; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Robustness,
    LeaveOut,
    Transfer,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Robustness => "robustness",
            Protocol::LeaveOut => "leave_out",
            Protocol::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn a directory of capture CSVs into an NDJSON dataset.
    Ingest {
        csv_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prefer flows whose DNS name contains this string.
        #[arg(long)]
        dns_hint: Option<String>,
    },
    /// Generate a synthetic benchmark from a JSON spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a triplet embedding model or a cross-entropy classifier.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a centroid gallery from a dataset.
    Gallery {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify streams, rejecting those below the confidence threshold.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an evaluation protocol and write a JSON report.
    Eval {
        #[arg(value_enum)]
        protocol: Protocol,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match cli.command {
        Command::Ingest { csv_dir, out, dns_hint } => commands::ingest(&csv_dir, &out, dns_hint.as_deref(), seed),
        Command::Synth { config, out } => commands::synth(&config, &out, seed),
        Command::Train { config, out } => commands::train(&config, &out, seed),
        Command::Gallery { model, data, out } => commands::gallery(&model, &data, &out, seed),
        Command::Predict {
            model,
            gallery,
            data,
            threshold,
            out,
        } => commands::predict(&model, &gallery, &data, threshold, &out, seed),
        Command::Eval { protocol, config, out } => commands::eval(protocol, &config, &out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
