//! `sparge`: run, tune and benchmark the block-sparse attention engine on
//! `.stz` tensors.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparge_core::SpargeError;

#[derive(Parser)]
#[command(name = "sparge", version, about = "Block-sparse attention with online filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run sparse attention on stored Q/K/V tensors.
    Run(RunArgs),
    /// Grid-search tau, theta and lambda against a calibration directory.
    Tune(TuneArgs),
    /// Compare token orderings on a synthetic smooth grid input.
    PermuteEval(PermuteEvalArgs),
    /// Time mask prediction against the dense block loop over sequence lengths.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct RunArgs {
    /// Query tensor (.stz, shape [heads, n, d] or [n, d]).
    #[arg(long)]
    pub q: PathBuf,
    /// Key tensor (.stz).
    #[arg(long)]
    pub k: PathBuf,
    /// Value tensor (.stz).
    #[arg(long)]
    pub v: PathBuf,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also compute the exact dense reference and report the relative L1.
    #[arg(long)]
    pub oracle: bool,
    /// Output tensor path (.stz).
    #[arg(long)]
    pub out: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args)]
pub struct TuneArgs {
    /// Directory of calibration triples named <stem>.q.stz/.k.stz/.v.stz.
    #[arg(long)]
    pub calib: PathBuf,
    /// Stage-1 relative L1 bound for the (tau, theta) scan.
    #[arg(long)]
    pub l1: f64,
    /// Stage-2 relative L1 bound for the lambda scan; must exceed --l1.
    #[arg(long)]
    pub l2: f64,
    /// Output parameters path (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PermuteEvalArgs {
    /// Grid extents as T,H,W.
    #[arg(long)]
    pub dims: String,
    /// Channel count per token.
    #[arg(long)]
    pub d: usize,
    /// Seed for the synthetic input and the random ordering.
    #[arg(long)]
    pub seed: u64,
    /// Report path (JSON).
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Comma-separated sequence lengths, e.g. 8192,16384,32768.
    #[arg(long)]
    pub lens: String,
    /// Channel count per token.
    #[arg(long)]
    pub d: usize,
    /// Head count.
    #[arg(long)]
    pub heads: usize,
    /// Report path (JSON).
    #[arg(long)]
    pub report: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => commands::run(args),
        Command::Tune(args) => commands::tune(args),
        Command::PermuteEval(args) => commands::permute_eval(args),
        Command::Bench(args) => commands::bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("sparge: {err}");
            match err {
                SpargeError::Invariant(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
