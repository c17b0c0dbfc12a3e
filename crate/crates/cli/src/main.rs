use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eiv_cli::commands::{cmd_evaluate, cmd_generate, cmd_predict, cmd_reproduce, cmd_train, PredictOptions};
use eiv_cli::config::Overrides;
use eiv_cli::suites::{SuiteOptions, SUITE_NAMES};
use eiv_cli::CliError;

/// Errors-in-variables regression with Bayesian neural networks.
#[derive(Parser)]
#[command(name = "eiv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and test data of a configuration as CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Seed of the training data generator.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured models and save them.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Deming factor of the EiV model.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV with a header containing the model's input columns.
        #[arg(long)]
        input: PathBuf,
        /// Configuration to take the prediction settings from.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Network draws.
        #[arg(long)]
        k: Option<usize>,
        /// Latent input draws per network draw.
        #[arg(long)]
        l: Option<usize>,
        /// Output CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over repeated runs.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Seed of the first run.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long = "parallel-runs")]
        parallel_runs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in experiment suite.
    Reproduce {
        #[arg(value_parser = SUITE_NAMES)]
        suite: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long = "parallel-runs")]
        parallel_runs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Data file for the wine and housing suites.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, seed, out } => cmd_generate(&config, seed, out).map(drop),
        Command::Train {
            config,
            seed,
            delta,
            out,
        } => {
            let o = Overrides {
                seed,
                delta,
                out,
                ..Overrides::default()
            };
            cmd_train(&config, &o).map(drop)
        }
        Command::Predict {
            model,
            input,
            config,
            seed,
            k,
            l,
            out,
        } => {
            let opts = PredictOptions { config, seed, k, l, out };
            cmd_predict(&model, &input, &opts).map(drop)
        }
        Command::Evaluate {
            config,
            seed,
            delta,
            runs,
            parallel_runs,
            out,
        } => {
            let o = Overrides {
                seed,
                delta,
                runs,
                parallel_runs,
                out,
            };
            cmd_evaluate(&config, &o).map(drop)
        }
        Command::Reproduce {
            suite,
            seed,
            runs,
            parallel_runs,
            out,
            data,
        } => {
            let opts = SuiteOptions {
                seed,
                runs,
                parallel_runs,
                data,
            };
            cmd_reproduce(&suite, &opts, out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
