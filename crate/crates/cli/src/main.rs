//! `splinehmm` command-line front end.
//!
//! Exit codes: 0 success, 1 modeling failure (non-convergence, failed
//! initialization), 2 usage or input error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Outcome;

#[derive(Debug, Parser)]
#[command(name = "splinehmm", version, about = "Hidden Markov models with tensor-product B-spline emission densities")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate observation and state files from a scenario.
    Simulate(commands::SimulateArgs),
    /// Fit a model to a CSV dataset.
    Fit(commands::FitArgs),
    /// Choose the basis count by cross-validation and fit the selected model.
    Cv(commands::CvArgs),
    /// Decode the most likely state sequence with a fitted model.
    Decode(commands::DecodeArgs),
    /// Export state densities on a grid (and the steady-state curve of covariate models).
    ExportDensity(commands::ExportArgs),
    /// Run the simulation study comparing the spline and Gaussian models.
    Study(commands::StudyArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let ctx = commands::Context {
        config: match config::FileConfig::load(cli.config.as_deref()) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e:#}");
                return ExitCode::from(2);
            }
        },
        force: cli.force,
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Fit(a) => commands::fit(&ctx, a),
        Command::Cv(a) => commands::cv(&ctx, a),
        Command::Decode(a) => commands::decode(&ctx, a),
        Command::ExportDensity(a) => commands::export_density(&ctx, a),
        Command::Study(a) => commands::study(&ctx, a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => {
            eprintln!("error: the optimizer did not converge (outputs were written; pass --allow-nonconverged to accept)");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
