//! The `foley` command line: curate, train, generate, evaluate, inspect.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::*;
pub use config::*;

use crate::error::Error;

#[derive(Debug, Parser)]
#[command(name = "foley", version, about = "Text-video-to-audio flow matching at desk scale")]
pub struct Cli {
    /// Seed for every random draw in the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with [model], [train], [data], [curate], [generate] and [evaluate] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk, filter and tag every WAV under a directory into a manifest.
    Curate(CurateArgs),
    /// Train on the kept clips of a manifest.
    Train(TrainArgs),
    /// Sample audio from a checkpoint.
    Generate(GenerateArgs),
    /// Compare generated and reference WAV directories.
    Evaluate(EvaluateArgs),
    /// Describe a checkpoint, embedding file, manifest or WAV.
    Inspect(InspectArgs),
    /// Write a small labelled corpus of synthetic WAV files.
    SynthCorpus(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    pub root: PathBuf,
    /// Output directory; defaults to the corpus root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub min_effective_sr: Option<f64>,
    #[arg(long)]
    pub min_snr_db: Option<f64>,
    #[arg(long)]
    pub silence_threshold: Option<f64>,
    #[arg(long)]
    pub chunk_seconds: Option<f64>,
    #[arg(long)]
    pub no_snr_gate: bool,
    /// Fail with exit code 2 if any file is unreadable.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory the manifest paths are relative to; defaults to the manifest's directory.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub repa_weight: Option<f32>,
    #[arg(long)]
    pub cfg_dropout: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub clip_seconds: Option<f64>,
    /// Train on only the first N kept clips, with the overfit learning rate unless one is given.
    #[arg(long)]
    pub overfit: Option<usize>,
    /// Continue from the newest checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub text: Option<String>,
    /// Raw bytes used as the video signal.
    #[arg(long, conflicts_with = "video_stub")]
    pub video: Option<PathBuf>,
    /// Synthesize a seeded stand-in video signal.
    #[arg(long)]
    pub video_stub: bool,
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f32>,
    /// Permit a missing text or video condition, replaced by its null embedding.
    #[arg(long)]
    pub allow_null: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub provider: Option<String>,
    /// Directory for report.jsonl and the effective config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub dir: PathBuf,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Config(_) | Error::Usage(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
