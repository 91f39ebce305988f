//! `aligndet`: verification, gradient checks, alignment analysis, training,
//! evaluation, arm comparison and benchmarks from the command line.
//!
//! Exit codes: 0 when the run passes, 1 when a check fails or the run
//! errors, 2 for usage and configuration errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "aligndet",
    version,
    about = "Convolution as RoIAlign: checks, experiments and benchmarks"
)]
pub struct Cli {
    /// JSON config of the command; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "aligndet-out")]
    pub out: PathBuf,
    /// Element type; defaults to f64, or f32 for `bench`.
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Conv == RoIAlign + FC, RoIConv identity, im2col adjoint, RoIConv sample points.
    Verify,
    /// Finite-difference checks of every backward pass and the detector loss.
    Gradcheck,
    /// Implicit RoI sizes, anchor misalignment and alignment histograms.
    Analyze,
    /// Train the detector; writes the loss curve and a checkpoint.
    Train,
    /// COCO-style AP of a checkpoint or of a detections file.
    Eval,
    /// Train every alignment arm over several seeds and compare.
    Compare,
    /// Time conv, deformable conv and RoIConv; FLOP table.
    Bench,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Gradcheck => "gradcheck",
            Command::Analyze => "analyze",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Compare => "compare",
            Command::Bench => "bench",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(outcome) => {
            eprintln!(
                "{}: {}",
                cli.command.name(),
                if outcome.passed { "PASS" } else { "FAIL" }
            );
            ExitCode::from(if outcome.passed { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
