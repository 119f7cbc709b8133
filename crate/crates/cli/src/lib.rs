//! Command-line front end of the spatter pipeline.
//!
//! Each subcommand reads a JSON [`config::PipelineConfig`], runs one stage
//! and writes its artifacts under the output directory. Inputs not named in
//! the config are taken from the same directory, so stages chain:
//! `synth`, `segment`, `track`, `sample`, `dataset`, `train`, `evaluate`,
//! `explain`, `screen`, `map`.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Data {
        stage: String,
        #[source]
        source: spatter_core::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Data { .. } => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub(crate) fn data(stage: &str) -> impl FnOnce(spatter_core::Error) -> CliError + '_ {
        move |source| CliError::Data { stage: stage.to_string(), source }
    }
}

#[derive(Debug, Parser)]
#[command(name = "spatter", version, about = "Spatter segmentation, tracking, classification and process-map screening")]
pub struct Cli {
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Master seed replacing every stage seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Rasterize a point CSV onto a grid and write a validated bundle.
    Ingest,
    /// Label metal components of each bundle.
    Segment,
    /// Link spatter blobs across frames.
    Track,
    /// Draw melt-pool surface samples matching the new spatter per frame.
    Sample,
    /// Assemble, split and describe the labeled dataset.
    Dataset,
    /// Grid-search and fit a classifier.
    Train,
    /// Score the model on the train and test partitions.
    Evaluate,
    /// Shapley attributions and partial dependence.
    Explain,
    /// Generate surrogate melt-pool frames with injected spatter.
    Synth,
    /// Classify melt-pool cells over a power/velocity grid.
    Screen,
    /// Write the process map, trend curves and overlay.
    Map,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Segment => "segment",
            Command::Track => "track",
            Command::Sample => "sample",
            Command::Dataset => "dataset",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Explain => "explain",
            Command::Synth => "synth",
            Command::Screen => "screen",
            Command::Map => "map",
        }
    }
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => config::PipelineConfig::load(p)?,
        None => config::PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    cfg.check()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        // a second call in one process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    commands::execute(cli.command, &cfg, &cli.out, cli)
}
