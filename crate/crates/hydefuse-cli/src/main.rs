//! Command-line frontend for the hydefuse library.
//!
//! Five subcommands cover the pipeline end to end: `simulate` renders a pair
//! of observations from a scene, `fuse` runs the fixed-point iteration,
//! `denoise` applies a kernel filter on its own, `contraction` sweeps the
//! measured contraction factor over a parameter grid, and `metrics` scores
//! one image against another. Every command writes a `report.json` echoing
//! the fully resolved configuration so a run can be reproduced from its
//! artifacts alone.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
//! 4 I/O failure.

/// Prints a status line, tolerating a closed stdout (e.g. piped to `head`).
/// Artifacts on disk are the real output; narration must never panic.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hydefuse::Error;

#[derive(Debug, Parser)]
#[command(name = "hydefuse", version, about = "Denoiser-driven fusion of hyperspectral and multispectral images")]
struct Cli {
    /// JSON config file supplying defaults; explicit flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Cap on worker threads for internal parallelism.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render hyperspectral and multispectral observations of a scene.
    Simulate(SimulateArgs),
    /// Fuse an observation pair into a full-resolution image.
    Fuse(FuseArgs),
    /// Apply a kernel filter to an image on its own.
    Denoise(DenoiseArgs),
    /// Sweep measured contraction factors over a parameter grid.
    Contraction(ContractionArgs),
    /// Score an image against a reference.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BlurChoice {
    /// Fixed 5-tap spline kernel.
    Starck,
    /// Truncated Gaussian; shaped by --radius and --std.
    Gauss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindChoice {
    /// Bandwise filter followed by the clustered filter.
    Caskd,
    /// Clustered high-dimensional filter only.
    W,
    /// Bandwise filter only.
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitChoice {
    Zeros,
    Ones,
    Noise,
    Surrogate,
}

/// Forward-model flags shared by the commands that need one.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Spatial blur applied before decimation.
    #[arg(long, value_enum)]
    pub blur: Option<BlurChoice>,

    /// Half-width of the Gaussian blur kernel, in pixels.
    #[arg(long)]
    pub radius: Option<usize>,

    /// Standard deviation of the Gaussian blur kernel.
    #[arg(long)]
    pub std: Option<f64>,

    /// Decimation factor between the full and coarse grids.
    #[arg(long)]
    pub decimation: Option<usize>,

    /// Weight of the multispectral data term.
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Number of adjacent-band groups averaged into each multispectral band.
    #[arg(long)]
    pub groups: Option<usize>,
}

/// Denoiser flags shared by the commands that build one.
#[derive(Debug, Args)]
pub struct DenoiserArgs {
    /// Which filter to build.
    #[arg(long, value_enum)]
    pub kind: Option<KindChoice>,

    /// Patch side length (odd).
    #[arg(long)]
    pub patch: Option<usize>,

    /// Spatial window half-width; 1 makes the filter an identity.
    #[arg(long)]
    pub window: Option<usize>,

    /// Feature bandwidth of the clustered filter.
    #[arg(long)]
    pub sigma1: Option<f64>,

    /// Patch bandwidth of the bandwise filter.
    #[arg(long)]
    pub sigma2: Option<f64>,

    /// Number of clusters for the clustered filter.
    #[arg(long)]
    pub clusters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene to observe, as an HSB file.
    #[arg(long, value_name = "FILE", required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,

    /// Generate the scene instead: rows, cols, bands, spectral rank, seed.
    #[arg(long, num_args = 5, value_names = ["ROWS", "COLS", "BANDS", "RANK", "SEED"])]
    pub synthetic: Option<Vec<u64>>,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Hyperspectral SNR in dB; `inf` for noiseless.
    #[arg(long)]
    pub snr_h: Option<f64>,

    /// Multispectral SNR in dB; `inf` for noiseless.
    #[arg(long)]
    pub snr_m: Option<f64>,

    /// Noise seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Hyperspectral observation (coarse grid, all bands).
    #[arg(long, value_name = "FILE")]
    pub hs: PathBuf,

    /// Multispectral observation (full grid, mixed bands).
    #[arg(long, value_name = "FILE")]
    pub ms: PathBuf,

    /// Ground truth; enables metrics and a per-iteration PSNR column.
    #[arg(long, value_name = "FILE")]
    pub gt: Option<PathBuf>,

    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub denoiser: DenoiserArgs,

    /// Dimension of the spectral subspace.
    #[arg(long)]
    pub subspace_dim: Option<usize>,

    /// Step size as a fraction of the stability limit; below 2 converges.
    #[arg(long)]
    pub gamma_frac: Option<f64>,

    /// Iteration budget.
    #[arg(long)]
    pub max_iters: Option<usize>,

    /// Relative successive-difference stopping threshold.
    #[arg(long)]
    pub tol: Option<f64>,

    /// Starting iterate.
    #[arg(long, value_enum)]
    pub init: Option<InitChoice>,

    /// Seed for the clustering and the noise initialization.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Where to write the iteration trace (default OUT/trace.csv).
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// Image to filter, as an HSB file; also serves as the filter's guide.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,

    #[command(flatten)]
    pub denoiser: DenoiserArgs,

    /// Seed for the clustering.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ContractionArgs {
    /// Hyperspectral observation (coarse grid, all bands).
    #[arg(long, value_name = "FILE")]
    pub hs: PathBuf,

    /// Multispectral observation (full grid, mixed bands).
    #[arg(long, value_name = "FILE")]
    pub ms: PathBuf,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Dimension of the spectral subspace.
    #[arg(long)]
    pub subspace_dim: Option<usize>,

    /// Patch side length (odd).
    #[arg(long)]
    pub patch: Option<usize>,

    /// Spatial window half-width.
    #[arg(long)]
    pub window: Option<usize>,

    /// Number of clusters for the clustered filter.
    #[arg(long)]
    pub clusters: Option<usize>,

    /// Step-size fractions to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub gamma_frac: Option<Vec<f64>>,

    /// Feature bandwidths to sweep, comma separated, paired with --sigma2.
    #[arg(long, value_delimiter = ',')]
    pub sigma1: Option<Vec<f64>>,

    /// Patch bandwidths to sweep, comma separated, paired with --sigma1.
    #[arg(long, value_delimiter = ',')]
    pub sigma2: Option<Vec<f64>>,

    /// Seed for the clustering.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Reference image.
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,

    /// Image to score.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,

    /// Resolution ratio entering the relative-error normalization.
    #[arg(long)]
    pub decimation: Option<usize>,

    /// Output directory for report.json; omit to print only.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Maps library errors onto the documented exit codes.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Dimension { .. }
        | Error::Parameter(_)
        | Error::Capacity(_)
        | Error::UndefinedSnr => 2,
        Error::Divergence { .. } | Error::NonFinite { .. } => 3,
        Error::Io(_) | Error::Format(_) => 4,
    }
}

fn run(cli: Cli) -> hydefuse::Result<()> {
    let file = config::FileConfig::load(cli.config.as_deref())?;
    if let Some(n) = cli.threads.or(file.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|err| Error::Parameter(format!("thread pool: {err}")))?;
    }
    match cli.command {
        Command::Simulate(args) => commands::simulate(args, &file),
        Command::Fuse(args) => commands::fuse(args, &file),
        Command::Denoise(args) => commands::denoise(args, &file),
        Command::Contraction(args) => commands::contraction(args, &file),
        Command::Metrics(args) => commands::metrics(args, &file),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        use std::io::Write;
        let _ = writeln!(std::io::stderr(), "error: {err}");
        std::process::exit(exit_code(&err));
    }
}
