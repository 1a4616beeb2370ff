//! `hdmba` command line: synthesize, train, dehaze, evaluate, params,
//! spectra, bandcurve.
//!
//! Each subcommand writes its artifacts and returns a JSON summary that
//! `main` prints to stdout. Exit codes: 0 success, 2 usage or configuration,
//! 3 I/O, 4 numeric failure.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{FlatConfig, Preset};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// Bad flags, config keys or inputs.
#[derive(Debug)]
pub struct Usage(pub String);

impl Usage {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<hdmba::Error>() {
            return match e {
                hdmba::Error::Io { .. } | hdmba::Error::Format { .. } => EXIT_IO,
                hdmba::Error::NonFiniteLoss { .. } | hdmba::Error::NonScalarLoss(_) | hdmba::Error::MissingGradient(_) => EXIT_NUMERIC,
                hdmba::Error::ShapeMismatch { .. } | hdmba::Error::InvalidArgument { .. } | hdmba::Error::Json(_) => EXIT_USAGE,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    1
}

#[derive(Debug, Parser)]
#[command(name = "hdmba", version, about = "Hyperspectral dehazing with window selective-scan blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic hazy/clean dataset.
    Synthesize(SynthesizeArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Dehaze one cube with a checkpoint.
    Dehaze(DehazeArgs),
    /// Score cubes or a whole dataset split.
    Evaluate(EvaluateArgs),
    /// Parameter counts per block.
    Params(ParamsArgs),
    /// Per-pixel spectra as CSV.
    Spectra(SpectraArgs),
    /// Per-band SSIM/PSNR of hazy and dehazed cubes as CSV.
    Bandcurve(BandcurveArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    #[arg(long, default_value_t = 4)]
    pub thickness_levels: usize,
    /// Number of abundance levels (`0.08, 0.16, ...` unless given explicitly).
    #[arg(long, default_value_t = 5)]
    pub abundances: usize,
    #[arg(long, value_delimiter = ',')]
    pub abundance_values: Option<Vec<f64>>,
    /// Side length; `--width`/`--height` override it.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub bands: usize,
    #[arg(long, default_value_t = hdmba::haze::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Random (thickness, abundance) cells per scene instead of the full grid.
    #[arg(long)]
    pub pairs_per_scene: Option<usize>,
}

/// Model overrides shared by `train` and `params`.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Flat TOML file; flags win over its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bands: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub rdms: Option<usize>,
    #[arg(long)]
    pub dmls: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub state_size: Option<usize>,
    #[arg(long)]
    pub expansion: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    /// Comma list of `no-ssm`, `no-dconv`, `no-gate`, `no-mlp`.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
    /// Keep the MLP branch (the default) even when ablating.
    #[arg(long)]
    pub mlp: bool,
    /// `add` or `concat`.
    #[arg(long)]
    pub tail_fusion: Option<String>,
    #[arg(long)]
    pub theta1: Option<f64>,
    #[arg(long)]
    pub theta2: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint; its model and training settings apply.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps (default: all iterations).
    #[arg(long)]
    pub stop_at: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub clip_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct DehazeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Tile side for large cubes; 0 processes the whole cube at once.
    #[arg(long, default_value_t = 0)]
    pub tile: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Reference (clean) cube; use with `--test`.
    #[arg(long, requires = "test", conflicts_with = "data")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Score dehazed outputs of this checkpoint as well as the hazy inputs.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub tile: usize,
    /// Directory for the JSON/CSV reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ParamsArgs {
    #[arg(long, conflicts_with = "config")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also search the channel width closest to this many parameters.
    #[arg(long)]
    pub calibrate: Option<usize>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SpectraArgs {
    #[arg(long = "cube", required = true)]
    pub cubes: Vec<PathBuf>,
    /// Pixel as `x,y`; repeatable.
    #[arg(long = "at", required = true, value_parser = parse_pixel)]
    pub pixels: Vec<(usize, usize)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BandcurveArgs {
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub hazy: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub tile: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected x,y, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(x)?, p(y)?))
}

pub fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    match cli.command {
        Command::Synthesize(a) => commands::synthesize(&a),
        Command::Train(a) => commands::train(&a),
        Command::Dehaze(a) => commands::dehaze(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Params(a) => commands::params(&a),
        Command::Spectra(a) => commands::spectra(&a),
        Command::Bandcurve(a) => commands::bandcurve(&a),
    }
}
