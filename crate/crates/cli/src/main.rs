#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "tellscan",
    version,
    about = "Tell detection pipeline: tiles, training, evaluation, site registry"
)]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic raster store, site polygons, tiles and manifest.
    Synth(SynthArgs),
    /// Cut tiles around real sites plus random negatives.
    Ingest(IngestArgs),
    /// Write augmented image/mask pairs and their trace log.
    AugmentPreview(PreviewArgs),
    /// Two-stage fine-tuning; writes a named checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Evaluate(EvaluateArgs),
    /// Write georeferenced heatmaps for tiles.
    Predict(PredictArgs),
    /// Extract candidates from heatmaps into the site registry.
    Sites(SitesArgs),
    /// Consolidate evaluation outputs into one report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 208)]
    pub tiles: usize,
    /// Number of positive tiles.
    #[arg(long, default_value_t = 88)]
    pub positive: usize,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// synthetic, bing, corona or mixed.
    #[arg(long, default_value = "synthetic")]
    pub flavor: String,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Site polygons (.shp or text).
    #[arg(long)]
    pub sites: Option<PathBuf>,
    /// Directory of PGM/PPM rasters with world files.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Minimum distance of negatives from any site, meters.
    #[arg(long)]
    pub clearance: Option<f64>,
    /// Force the source tag (BING or CORONA).
    #[arg(long)]
    pub source: Option<String>,
}

#[derive(Args, Debug)]
pub struct PreviewArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// BING, CORONA, BOTH or SYNTHETIC.
    #[arg(long)]
    pub sources: Option<String>,
    /// Checkpoint to fine-tune from.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "TEST")]
    pub split: String,
    /// Repetitions; the first is on the plain tiles, later ones on seeded
    /// augmented copies.
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "TEST")]
    pub split: String,
    /// Single tile image (with world file) instead of a manifest split.
    #[arg(long)]
    pub tile: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SitesArgs {
    /// Directory of probability maps written by `predict`.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    /// Existing registry export to merge into.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_area: Option<f64>,
    #[arg(long)]
    pub dedupe: Option<f64>,
    #[arg(long)]
    pub confirm: Vec<String>,
    #[arg(long)]
    pub reject: Vec<String>,
    /// Audit timestamp, Unix seconds (default: SOURCE_DATE_EPOCH or now).
    #[arg(long)]
    pub timestamp: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory of evaluation outputs.
    #[arg(long)]
    pub evals: Option<PathBuf>,
    /// Checkpoints whose validation history goes into the report.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(tellscan::Error),
}

impl From<tellscan::Error> for CliError {
    fn from(e: tellscan::Error) -> Self {
        match e {
            tellscan::Error::Config(m) => CliError::Usage(m),
            other => CliError::Run(other),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(CliError::Usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&mut cfg, &a),
        Command::Ingest(a) => commands::ingest(&mut cfg, &a),
        Command::AugmentPreview(a) => commands::augment_preview(&mut cfg, &a),
        Command::Train(a) => commands::train(&mut cfg, &a),
        Command::Evaluate(a) => commands::evaluate(&mut cfg, &a),
        Command::Predict(a) => commands::predict(&mut cfg, &a),
        Command::Sites(a) => commands::sites(&mut cfg, &a),
        Command::Report(a) => commands::report(&mut cfg, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error kind=usage message={}", one_line(&m));
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error kind={} message={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
