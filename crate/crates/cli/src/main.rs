//! `metaforge`: TMM sweeps, surrogate training, PSO design and INN retrieval
//! from the command line.

mod commands;
mod config;
mod workspace;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metaforge::tmm::ModeKind;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    Config(String),
    /// Input rejected by the geometry or band checks; exit code 3.
    Infeasible(String),
    /// Anything that failed while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Infeasible(m) => write!(f, "infeasible input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "metaforge", version, about = "Design ring-insert pipe metamaterials")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Workspace root (overrides METAFORGE_WORKSPACE and the config).
    #[arg(long, global = true)]
    pub workspace: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Transmission curve of one design (or the bare pipe) as CSV.
    Sweep {
        #[arg(long)]
        design: Option<PathBuf>,
        #[arg(long)]
        mode: ModeKind,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample designs and solve them with the TMM.
    GenSamples {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the per-frequency surrogate suite to a dataset.
    TrainSurrogates {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Widen the peak-free ranges with PSO on the surrogates.
    OptimizeBand {
        #[arg(long)]
        surrogates: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Minimum-mass designs for the planned bands.
    GenInverseSamples {
        #[arg(long)]
        surrogates: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the invertible network on an inverse dataset.
    TrainInn {
        /// `inverse.csv`, or the dataset directory holding it.
        #[arg(long)]
        inverse: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode a design for a band and check it with the TMM.
    Retrieve {
        /// `lo:hi` in Hz.
        #[arg(long)]
        band: String,
        /// Model directory, or its `manifest.json`.
        #[arg(long)]
        model: PathBuf,
        /// `zero`, or `samples:N[:seed]`.
        #[arg(long, default_value = "zero")]
        z: String,
    },
    /// TMM re-check of a design against a band.
    Verify {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        band: String,
        /// Restrict to these mode families.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<ModeKind>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metaforge: {e}");
            ExitCode::from(e.code())
        }
    }
}
