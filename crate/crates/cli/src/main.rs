//! `coxvi` command-line front end.
//!
//! Exit status: 0 on success, 1 for invalid input or configuration, 2 when a
//! computation fails. Errors are reported as one `error: ...` line on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coxvi::CoxError;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<CoxError> for CliError {
    fn from(e: CoxError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "coxvi", version, about = "Bayesian Cox regression by stochastic variational inference")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a cohort with known coefficients.
    Simulate(SimulateArgs),
    /// Fit the variational posterior.
    Fit(FitArgs),
    /// Exact maximum partial likelihood fit.
    OracleFit(OracleArgs),
    /// Summarize a fitted state.
    Summarize(SummarizeArgs),
    /// Harrell's C of a coefficient vector on a dataset.
    Concordance(ConcordanceArgs),
    /// Compare subsample log-likelihood approximations with the full one.
    ReweightStudy(StudyArgs),
    /// Repeated simulate-fit runs with coverage statistics.
    Coverage(CoverageArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n_individuals: Option<usize>,
    #[arg(long)]
    pub hazard_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Long-format CSV: id,start,stop,event,covariates...
    #[arg(long)]
    pub data: PathBuf,
    /// Read rows on demand instead of loading the file.
    #[arg(long)]
    pub disk: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = ["normal", "student-t"])]
    pub prior: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long, value_parser = ["meanfield", "fullrank", "lowrank"])]
    pub family: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = ["ind", "obs"])]
    pub batch_mode: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub final_lr_fraction: Option<f64>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// `state.json` written by `fit`.
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ConcordanceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Coefficients: a JSON array, a `state.json`, an oracle or truth JSON,
    /// or a summary CSV.
    #[arg(long)]
    pub theta: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Dataset; simulated from the `[sim]` section when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub disk: bool,
    #[arg(long)]
    pub theta: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = ["ind", "obs"])]
    pub batch_mode: Option<String>,
    #[arg(long)]
    pub n_batches: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message().replace('\n', " "));
            ExitCode::from(e.code())
        }
    }
}
