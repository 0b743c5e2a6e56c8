use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gevsar::lattice::Stencil;
use gevsar::{Error, ErrorKind};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "gevsar", version, about = "Simulate, estimate and validate GEV-SAR spatial extremes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct LatticeArgs {
    /// Grid side length.
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// SAR stencil: tridiagonal-1d or lattice-2d.
    #[arg(long, default_value = "tridiagonal-1d")]
    stencil: Stencil,
    /// Buffer nodes on each side of the grid.
    #[arg(long, default_value_t = 4)]
    buffer: usize,
    /// Wendland support radius in node spacings.
    #[arg(long, default_value_t = 2.5)]
    radius: f64,
}

#[derive(Args, Debug, Clone)]
struct ParamArgs {
    #[arg(long)]
    xi: f64,
    #[arg(long)]
    kappa2: f64,
    #[arg(long)]
    tau2: f64,
}

#[derive(Args, Debug, Clone)]
struct EstimatorArgs {
    /// Directory written by `train` (weights.bin and estimator.json).
    #[arg(long)]
    model: PathBuf,
    /// Bias corrector JSON written by `uq-fit`.
    #[arg(long)]
    corrector: Option<PathBuf>,
    /// Quantile-regression interval model JSON written by `uq-fit`.
    #[arg(long)]
    intervals: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one d x d x r stack at fixed parameters.
    Simulate {
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, default_value_t = 30)]
        r: usize,
        #[command(flatten)]
        lattice: LatticeArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a training dataset of simulated stacks.
    Dataset {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 30)]
        r: usize,
        #[command(flatten)]
        lattice: LatticeArgs,
        /// Sample kappa2 and tau2 uniformly on the linear scale.
        #[arg(long)]
        linear: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the estimator network on a dataset.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 10)]
        patience: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for weights.bin, estimator.json and history.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate parameters of one or more stacks.
    Estimate {
        #[command(flatten)]
        estimator: EstimatorArgs,
        /// Stack files.
        #[arg(long = "stack", required = true)]
        stacks: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// No-nugget maximum-likelihood fit of (xi, kappa2).
    Mle {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long, default_value = "tridiagonal-1d")]
        stencil: Stencil,
        #[arg(long, default_value_t = 2.5)]
        radius: f64,
        #[arg(long, default_value_t = 3)]
        starts: usize,
        #[arg(long, default_value_t = 400)]
        max_iter: usize,
        /// Report wall-clock seconds (makes the output non-reproducible).
        #[arg(long)]
        timing: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit interval models and the bias corrector on a calibration dataset.
    UqFit {
        #[arg(long)]
        model: PathBuf,
        /// Calibration dataset directory (not the training set).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Interval model JSON.
        #[arg(long)]
        out_intervals: PathBuf,
        /// Bias corrector JSON.
        #[arg(long)]
        out_corrector: PathBuf,
    },
    /// Empirical interval coverage on an interior parameter grid.
    UqCoverage {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        intervals: PathBuf,
        /// Points per parameter axis.
        #[arg(long, default_value_t = 3)]
        grid: usize,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Madogram of a stack, pooled over replicates.
    Madogram {
        #[arg(long)]
        stack: PathBuf,
        /// Largest distance; defaults to d/2.
        #[arg(long)]
        max_h: Option<f64>,
        /// Number of bins; defaults to ceil(max_h).
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// QQ and madogram comparison of a stack against simulations.
    Qq {
        #[arg(long)]
        stack: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, default_value_t = 400)]
        reps: usize,
        #[arg(long, default_value = "tridiagonal-1d")]
        stencil: Stencil,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// QQ CSV.
        #[arg(long)]
        out: PathBuf,
        /// ARE CSV of the QQ quantiles.
        #[arg(long)]
        are_out: Option<PathBuf>,
        /// Madogram envelope CSV.
        #[arg(long)]
        envelope_out: Option<PathBuf>,
    },
    /// Tile a grid and estimate every tile.
    Tiles {
        /// Grid directory.
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[arg(long, default_value_t = 16)]
        tile_size: usize,
        #[arg(long, default_value_t = 0.9)]
        min_valid: f64,
        /// Simulated stacks per tile for diagnostics; 0 skips them.
        #[arg(long, default_value_t = 0)]
        diag_reps: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Smooth tile estimates into parameter surfaces.
    Surface {
        /// Tile results CSV from `tiles`.
        #[arg(long)]
        tiles: PathBuf,
        /// Grid directory the tiles came from.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 16)]
        tile_size: usize,
        /// Gaussian kernel bandwidth in cells.
        #[arg(long, default_value_t = 16.0)]
        bandwidth: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output grid directory (three layers: xi, kappa2, tau2).
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Io => 1,
        ErrorKind::Usage => 2,
        ErrorKind::Format => 3,
        ErrorKind::Numerical => 4,
    }
}

fn report(tag: &str, kind: &str, message: &str) {
    let line = serde_json::json!({ "error": tag, "kind": kind, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", "usage", e.to_string().trim_end());
            return ExitCode::from(exit_code(ErrorKind::Usage));
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let name = match kind {
                ErrorKind::Usage => "usage",
                ErrorKind::Format => "format",
                ErrorKind::Numerical => "numerical",
                ErrorKind::Io => "io",
            };
            report(e.tag(), name, &e.to_string());
            ExitCode::from(exit_code(kind))
        }
    }
}

pub(crate) type CliResult = Result<(), Error>;
