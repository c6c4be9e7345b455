mod commands;
mod config;
mod manifest;

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Schema(String),
    #[error("missing file {path}: {reason}")]
    MissingFile { path: PathBuf, reason: String },
    #[error("invalid input: {0}")]
    Invalid(amortized_transport::Error),
    #[error("{0}")]
    Runtime(#[from] amortized_transport::Error),
}

impl CliError {
    pub fn missing(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::MissingFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "atrans", version, about = "Amortized transport maps for Bayesian inversion")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config. Keys can be overridden with `--section.key=value`.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a joint (u, y) dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a transport map on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Push reference samples through a trained map.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        obs: Observation,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a pCN reference chain for one observation.
    Pcn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        obs: Observation,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics for one observation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        obs: Observation,
        /// Reference ensemble (e.g. from `pcn`) for per-mode comparisons.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write plot-data CSVs into this directory.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
    /// Data-size and model-size scaling study on the scalar experiment.
    Scaling {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference check of the training-loss gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 40)]
        coords: usize,
    },
}

/// Observation selection: a dataset row or explicit values.
#[derive(Debug, Args)]
pub struct Observation {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub y_index: Option<usize>,
    /// Comma-separated observation vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub y: Option<Vec<f64>>,
}

fn run(cli: Cli, argv: Vec<String>, overrides: Vec<(String, String)>) -> Result<(), CliError> {
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Schema(format!("--workers: {e}")))?;
    }
    let ctx = |common: &Common| commands::Context::new(common, &overrides, argv.clone());
    match cli.command {
        Command::GenData { common, n, out } => commands::gen_data(ctx(&common)?, n, out),
        Command::Train { common, dataset, out } => commands::train(ctx(&common)?, dataset, out),
        Command::Sample {
            common,
            model,
            obs,
            n,
            out,
        } => commands::sample(ctx(&common)?, model, &obs, n, &out),
        Command::Pcn { common, obs, out } => commands::pcn(ctx(&common)?, &obs, &out),
        Command::Eval {
            common,
            model,
            obs,
            reference,
            out,
            plot_dir,
        } => commands::eval(ctx(&common)?, model, &obs, reference, &out, plot_dir),
        Command::Scaling { common, out_dir } => commands::scaling(ctx(&common)?, &out_dir),
        Command::Gradcheck { common, tol, coords } => commands::gradcheck(ctx(&common)?, tol, coords),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let (args, overrides) = config::split_overrides(argv.clone());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, argv, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
