//! `spectlv`: dataset preparation, DP priors, training, prediction,
//! evaluation, clinical quantification and reporting.

mod commands;
mod config;
mod error;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "spectlv", version, about = "LV segmentation and quantification for gated perfusion SPECT")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration (see config.schema.json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; every command writes only below it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, global = true, value_enum)]
    pub structure: Option<StructureArg>,
    /// Dataset manifest, overriding `paths.dataset`.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Prior directory, overriding `paths.priors`.
    #[arg(long, global = true)]
    pub priors: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Dp,
    Vnet,
    Mcvnet,
    Dpstvnet,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StructureArg {
    Endo,
    Myo,
    Epi,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop raw studies to 32³ long-axis volumes in the native layout.
    Prepare {
        /// Manifest of the raw studies.
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate DP shape priors for every gate of the dataset.
    Prior,
    /// Write a synthetic gated phantom dataset.
    Phantom {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one model on the whole dataset.
    Train,
    /// Segment the dataset with trained models.
    Predict {
        /// Model directory written by `train`; repeat for several structures.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// EDV, ESV, LVEF and scar burden from endocardium and myocardium predictions.
    Clinical {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Stratified k-fold cross-validation over variants and structures.
    Crossval,
    /// Summary tables and plot data from a crossval output directory.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("SPECTLV_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("SPECTLV_THREADS must be a positive integer, got `{v}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).line());
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|_| commands::run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
