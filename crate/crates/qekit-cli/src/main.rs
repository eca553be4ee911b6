//! `qekit` — the quality-estimation pipeline as one binary.
//!
//! Exit codes: 0 on success, 2 for invalid configuration or malformed
//! inputs, 1 for runtime failures. Set `QEKIT_LOG` to `error`, `warn`,
//! `info`, or `debug` for progress output on stderr.

mod artifacts;
mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qekit::Error;

use commands::{
    ChannelArgs, EnsembleArgs, PredictArgs, ScoreArgs, SpanifyArgs, SynthArgs, TrainArgs,
};
use config::FileConfig;

#[derive(Debug, Parser)]
#[command(
    name = "qekit",
    version,
    about = "Translation quality estimation: train, predict, ensemble, span, score"
)]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every randomized stage. Required (here or in the config).
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory, created if missing (default: current directory).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset whose labels are exact functions of its
    /// hidden states, plus the hidden-state files and manifest.
    Synth(SynthArgs),
    /// Train the layer-pooling and prediction heads; writes a checkpoint
    /// and per-epoch history.
    Train(TrainArgs),
    /// Apply a checkpoint to a dataset; writes id-aligned predictions.
    Predict(PredictArgs),
    /// Search per-language-pair ensemble weights over prediction files.
    EnsembleSearch(EnsembleArgs),
    /// Convert predicted tags or severity channels into character spans.
    Spanify(SpanifyArgs),
    /// Convert reference quality scores into channel mixing weights.
    ChannelWeights(ChannelArgs),
    /// Evaluate predictions against gold labels, per language pair.
    Score(ScoreArgs),
}

/// Invalid configs and malformed inputs exit 2; failures of a valid run
/// (I/O mid-run, numerically degenerate data) exit 1.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::DimMismatch(_)
        | Error::Format { .. }
        | Error::Config(_) => 2,
        Error::Boundary(_) | Error::Degenerate(_) | Error::Io(_) => 1,
    }
}

fn init_logging() -> Result<(), String> {
    let level = match std::env::var("QEKIT_LOG") {
        Err(_) => log::LevelFilter::Warn,
        Ok(v) => match v.as_str() {
            "error" => log::LevelFilter::Error,
            "warn" => log::LevelFilter::Warn,
            "info" => log::LevelFilter::Info,
            "debug" => log::LevelFilter::Debug,
            other => {
                return Err(format!(
                    "QEKIT_LOG must be one of error, warn, info, debug; got `{other}`"
                ))
            }
        },
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn run(cli: Cli) -> qekit::Result<()> {
    let cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let seed = config::require(cli.seed, cfg.seed, "seed")?;
    let out = config::pick(cli.out.clone(), cfg.out.clone(), PathBuf::from("."));
    fs::create_dir_all(&out)?;

    match &cli.command {
        Command::Synth(args) => commands::cmd_synth(args, &cfg, seed, &out),
        Command::Train(args) => commands::cmd_train(args, &cfg, seed, &out),
        Command::Predict(args) => commands::cmd_predict(args, &cfg, seed, &out),
        Command::EnsembleSearch(args) => commands::cmd_ensemble_search(args, &cfg, seed, &out),
        Command::Spanify(args) => commands::cmd_spanify(args, &cfg, seed, &out),
        Command::ChannelWeights(args) => commands::cmd_channel_weights(args, &cfg, seed, &out),
        Command::Score(args) => commands::cmd_score(args, &cfg, seed, &out),
    }
}

fn main() -> ExitCode {
    if let Err(message) = init_logging() {
        eprintln!("qekit: {message}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qekit: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
