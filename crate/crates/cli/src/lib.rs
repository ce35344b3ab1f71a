//! Command-line front end: simulate thermal desorption spectra, generate
//! synthetic training data, train and apply the two-stage trap identifier,
//! and fit spectra with a particle swarm.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use tds_core::ModelVariant;

pub use crate::config::Overrides;
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tdsid", version, about = "Thermal desorption spectroscopy trap identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for simulation and training.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Trapping model used for simulations.
    #[arg(long, global = true, value_enum)]
    pub model_variant: Option<VariantArg>,

    /// Increase log verbosity (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    McnabbFoster,
    Oriani,
}

impl From<VariantArg> for ModelVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::McnabbFoster => ModelVariant::McNabbFoster,
            VariantArg::Oriani => ModelVariant::Oriani,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the spectrum of the configured trap list and write CSV.
    Simulate {
        #[arg(short, long)]
        config: PathBuf,
        /// CSV destination; standard output when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Report the flux leaving both faces of the sample.
        #[arg(long)]
        double_sided: bool,
        /// Append one release-rate column per trap.
        #[arg(long)]
        contributions: bool,
    },
    /// Generate one training dataset per trap count plus a held-out set.
    Generate {
        #[arg(short, long)]
        config: PathBuf,
        /// Destination directory; defaults to `paths.datasets_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a model bundle from generated datasets.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Directory holding the datasets; defaults to `paths.datasets_dir`.
        #[arg(long)]
        datasets: Option<PathBuf>,
        /// Bundle destination; defaults to `paths.bundle`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Predict trap count, energies and densities of a spectrum CSV.
    Infer {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        spectrum: Option<PathBuf>,
        /// Prediction destination; standard output when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Fit a fixed number of traps to a spectrum CSV by particle swarm.
    Fit {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        spectrum: Option<PathBuf>,
        /// Overrides `pso.n_traps`.
        #[arg(long)]
        n_traps: Option<usize>,
        /// Result destination; standard output when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Executes one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config {
                key: "--threads".into(),
                message: e.to_string(),
            })?;
    }
    let overrides = Overrides {
        seed: cli.seed,
        variant: cli.model_variant.map(Into::into),
    };
    match cli.command {
        Command::Simulate {
            config,
            output,
            double_sided,
            contributions,
        } => commands::simulate(&config, overrides, output, double_sided, contributions),
        Command::Generate { config, out_dir } => commands::generate(&config, overrides, out_dir),
        Command::Train {
            config,
            datasets,
            output,
        } => commands::train(&config, overrides, datasets, output),
        Command::Infer {
            config,
            bundle,
            spectrum,
            output,
        } => commands::infer(config.as_deref(), overrides, bundle, spectrum, output),
        Command::Fit {
            config,
            spectrum,
            n_traps,
            output,
        } => commands::fit(&config, overrides, spectrum, n_traps, output),
    }
}
