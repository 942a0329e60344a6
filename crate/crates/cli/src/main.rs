//! `sms`: batch soft Mumford-Shah segmentation.
//!
//! Exit codes: 0 when a run converged (or a helper command succeeded),
//! 2 when a run stopped at `--max-outer`, 1 on any error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sms_core::{InitMode, ModelKind, UpdateOrder};

#[derive(Parser)]
#[command(name = "sms", version, about = "Soft Mumford-Shah image segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment an image into K soft regions and write the artifacts.
    Segment(SegmentArgs),
    /// Turn ownership maps (PGM/PNG or raw) into a label PNG.
    Harden(HardenArgs),
    /// Print the energy of given ownerships and patterns as JSON.
    Energy(EnergyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Full,
    Pc,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Uniform,
    Quantile,
    Kmeans,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    OwnershipsFirst,
    PatternsFirst,
}

#[derive(Args)]
struct SegmentArgs {
    /// Input image (PGM, PPM or PNG).
    #[arg(long)]
    input: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 10.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1000.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.5)]
    epsilon: f64,
    #[arg(long, value_enum, default_value = "full")]
    model: ModelArg,
    #[arg(long, default_value_t = 100)]
    max_outer: usize,
    /// Stop once the relative energy decrease falls below this.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Patch file: {"patches":[{"channel":1,"x":0,"y":0,"w":8,"h":8}]}.
    #[arg(long)]
    supervision: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "kmeans")]
    init: InitArg,
    #[arg(long, value_enum, default_value = "ownerships-first")]
    order: OrderArg,
    /// Also write 32-bit float ownerships and patterns (`.sofp`).
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    no_ownerships: bool,
    #[arg(long)]
    no_labels: bool,
    #[arg(long)]
    no_trace: bool,
    #[arg(long)]
    no_residuals: bool,
    /// Print one line per outer iteration to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct HardenArgs {
    /// Ownership maps in channel order.
    #[arg(required = true, num_args = 2..)]
    ownerships: Vec<PathBuf>,
    #[arg(long, default_value = "labels.png")]
    out: PathBuf,
}

#[derive(Args)]
struct EnergyArgs {
    #[arg(long)]
    image: PathBuf,
    /// Ownership maps in channel order.
    #[arg(long = "own", required = true, num_args = 2..)]
    ownerships: Vec<PathBuf>,
    /// Raw pattern files, channel-major then band (`pattern_<i>_<b>.sofp`).
    #[arg(long = "pattern", num_args = 1.., conflicts_with = "means")]
    patterns: Vec<PathBuf>,
    /// Constant patterns, channel-major then band, comma separated.
    #[arg(long, value_delimiter = ',')]
    means: Vec<f64>,
    #[arg(long, default_value_t = 10.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1000.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.5)]
    epsilon: f64,
    /// Allowed deviation of the ownerships from the simplex.
    #[arg(long, default_value_t = sms_io::ROUNDED_TOL)]
    feasibility_tol: f64,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Full => ModelKind::Full,
            ModelArg::Pc => ModelKind::Pc,
        }
    }
}

impl From<InitArg> for InitMode {
    fn from(m: InitArg) -> Self {
        match m {
            InitArg::Uniform => InitMode::Uniform,
            InitArg::Quantile => InitMode::Quantile,
            InitArg::Kmeans => InitMode::Kmeans,
        }
    }
}

impl From<OrderArg> for UpdateOrder {
    fn from(m: OrderArg) -> Self {
        match m {
            OrderArg::OwnershipsFirst => UpdateOrder::OwnershipsFirst,
            OrderArg::PatternsFirst => UpdateOrder::PatternsFirst,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Segment(args) => commands::segment(args),
        Command::Harden(args) => commands::harden(args).map(|()| ExitCode::SUCCESS),
        Command::Energy(args) => commands::energy(args).map(|()| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(1)
    })
}
