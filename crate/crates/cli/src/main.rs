mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mindbridge::Error;

#[derive(Debug, Parser)]
#[command(name = "mindbridge", version, about = "Cross-subject brain decoding on synthetic cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization, dropout and evaluation.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving every artifact of the run.
    #[arg(long)]
    out: PathBuf,
    /// Floating-point precision (default: $MB_PRECISION, else f32).
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort container.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model on several subjects.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Cohort container written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adapt a pretrained checkpoint to a new subject.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Use only this many training samples of the new subject.
        #[arg(long)]
        subset: Option<usize>,
        /// Also train the new subject from scratch on the same samples and
        /// write a side-by-side comparison.
        #[arg(long)]
        baseline_scratch: bool,
    },
    /// Render recordings of one subject in another subject's voxel space.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on a cohort.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) | Error::Parameter(_) => 1,
        Error::Numerical(_) => 3,
        Error::Dimension(_) | Error::UnknownSubject(_) | Error::Format { .. } | Error::Io { .. } | Error::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
