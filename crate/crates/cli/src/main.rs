//! Command-line driver for the bundle adjustment experiments.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit codes.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_INVARIANT: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "gbp-ba",
    version,
    about = "Bundle adjustment with Gaussian belief propagation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic problem file.
    Gen(GenArgs),
    /// Solve a problem with GBP, optionally alongside the LM baseline.
    Solve(SolveArgs),
    /// Replay keyframes one at a time and record iterations per addition.
    Incremental(IncrementalArgs),
    /// Convergence fraction against initial keyframe noise.
    Sweep(SweepArgs),
    /// Final ARE and outlier classification against injected outlier fractions.
    Outliers(OutlierArgs),
}

/// Problem source: a file or a synthetic desk-scale scene.
#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// Problem file (native format, or BAL text).
    #[arg(long, conflicts_with_all = ["kf", "lm"])]
    pub input: Option<PathBuf>,
    /// Synthetic keyframe count.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub kf: u64,
    /// Synthetic landmark count.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub lm: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Output directory.
    #[arg(long, env = "GBP_BA_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,
}

/// Overrides of the engine schedule; unset flags keep the defaults.
#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    /// Relinearisation threshold on the state distance.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Message damping factor in [0, 1).
    #[arg(long)]
    pub damping: Option<f64>,
    /// Huber threshold in standard deviations; `inf` disables the kernel.
    #[arg(long)]
    pub nsigma: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Convergence target on the average reprojection error (pixels).
    #[arg(long)]
    pub are_target: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Lm,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutlierModeArg {
    Reassign,
    Uniform,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ColdArg {
    /// Solve each prefix from a perturbed ground truth.
    Perturbed,
    /// Rebuild the graph from the states at the moment of addition.
    Restart,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub kf: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub lm: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keyframe translation noise of the initialisation (metres).
    #[arg(long, default_value_t = 0.07)]
    pub kf_sigma: f64,
    /// Fraction of measurements to corrupt.
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
    #[arg(long, value_enum, default_value_t = OutlierModeArg::Reassign)]
    pub outlier_mode: OutlierModeArg,
    /// Output file; defaults to `problem.txt` in the output directory.
    #[arg(long)]
    pub file: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Also run a baseline solver on the same problem.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
}

#[derive(Args, Debug)]
pub struct IncrementalArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = ColdArg::Perturbed)]
    pub cold: ColdArg,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Keyframe noise levels (metres).
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,0.05,0.1,0.15,0.2,0.25"
    )]
    pub noise: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
}

#[derive(Args, Debug)]
pub struct OutlierArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.03,0.05,0.1")]
    pub outliers: Vec<f64>,
    #[arg(long, value_enum, default_value_t = OutlierModeArg::Reassign)]
    pub outlier_mode: OutlierModeArg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| commands::run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.code())
        }
        Err(_) => ExitCode::from(EXIT_INVARIANT),
    }
}
