//! Subcommands of the `stablegrasp` tool. Each command is a pure function of
//! its inputs; outputs are written atomically.

mod args;
mod commands;
mod poses;

use stablegrasp::Error;
use thiserror::Error as ThisError;

pub use args::*;
pub use commands::*;
pub use poses::{load_poses, PoseSet, ReconstructionOutput, RESULT_FILE};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_NO_RESULT: u8 = 2;
pub const EXIT_INVALID: u8 = 3;

#[derive(Debug, ThisError)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("no result: {0}")]
    NoResult(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::NoResult(_) => EXIT_NO_RESULT,
            Failure::Core(e) => match e.root() {
                Error::InvalidArgument(_) | Error::Parse { .. } | Error::Io { .. } => EXIT_INVALID,
                _ => EXIT_FAILURE,
            },
        }
    }
}

/// Text for stdout plus any bundles that produced no result.
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub no_result: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        if self.no_result.is_empty() {
            EXIT_OK
        } else {
            EXIT_NO_RESULT
        }
    }
}

/// Runs a parsed command on a pool of `cli.jobs` threads.
pub fn run(cli: Cli) -> Result<Outcome, Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Segment(a) => segment(a),
        Command::FitAxis(a) => fit_axis(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Metrics(a) => metrics(a),
        Command::Synth(a) => synth(a),
        Command::Analyze(a) => analyze(a),
    })
}
