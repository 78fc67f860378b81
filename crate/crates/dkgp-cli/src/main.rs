//! `dkgp`: train deep-kernel GP models, sweep the benchmark grid, count
//! parameters, and run the step-function demo.
//!
//! Exit codes are part of the interface: 1 for configuration errors, 2 for
//! data errors, 3 for numeric failures (the message names the stage). Every
//! output file is written to a temp sibling and renamed into place, so a
//! crash never leaves a partial artifact.

mod bench;
mod config;
mod output;
mod runner;
mod stepdemo;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use dkgp_core::models::{ModelKind, ALL_MODELS};

#[derive(Parser)]
#[command(name = "dkgp", version, about = "Deep-kernel Gaussian process regression toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model on one dataset; writes checkpoint.json and metrics.json.
    Train {
        /// JSON run config (see README for the schema).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides out_dir from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (dataset, model) cell; writes report.json and report.txt.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print trainable-parameter totals for the standard architectures.
    ParamCount {
        /// One of gp, dkl-mlp, dkl-kan1, dkl-kan2; all four when omitted.
        #[arg(long)]
        model: Option<String>,
        /// Input dimension.
        #[arg(long)]
        dims: usize,
    },
    /// Train gp, dkl-mlp, and dkl-kan on noisy step data and write
    /// prediction and latent-map CSVs.
    StepDemo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// An error carrying its exit code: 1 config, 2 data, 3 numeric.
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    /// Classify a core error by its exit-code family.
    pub fn core(err: dkgp_core::Error) -> Self {
        Self { code: classify(&err), msg: err.to_string() }
    }
}

/// Config errors are bad settings the user wrote; data errors are problems
/// with input files; everything else surfaces from the numerics.
pub fn classify(err: &dkgp_core::Error) -> u8 {
    use dkgp_core::Error as E;
    match err {
        E::InvalidConfig(_)
        | E::UnknownModel { .. }
        | E::GridTooSmall { .. }
        | E::TooManyDims { .. }
        | E::EmptyGrid
        | E::RankTooLarge { .. }
        | E::InvalidKnots(_)
        | E::Json(_) => 1,
        E::Parse { .. }
        | E::RaggedRows { .. }
        | E::EmptyFile
        | E::TooFewRows { .. }
        | E::Csv(_)
        | E::Io(_) => 2,
        _ => 3,
    }
}

/// Prefix an error with the stage it happened in.
pub fn at_stage<T>(stage: &str, r: dkgp_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| {
        let base = CliError::core(e);
        CliError { code: base.code, msg: format!("{stage}: {}", base.msg) }
    })
}

/// `DKGP_THREADS` caps worker concurrency; unset means 1.
pub fn worker_threads() -> Result<usize, CliError> {
    match std::env::var("DKGP_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::config(format!("DKGP_THREADS must be a positive integer, got '{s}'"))),
    }
}

fn cmd_param_count(model: Option<String>, dims: usize) -> Result<(), CliError> {
    if dims == 0 {
        return Err(CliError::config("dims must be at least 1"));
    }
    let kinds: Vec<ModelKind> = match model {
        Some(name) => vec![ModelKind::parse(&name).map_err(CliError::core)?],
        None => ALL_MODELS.to_vec(),
    };
    println!("{:<10} {:>12}", "model", "params");
    for kind in kinds {
        println!("{:<10} {:>12}", kind.name(), kind.total_param_count(dims));
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train { config, out } => {
            let cfg = config::load_run_config(&config)?;
            let out = config::resolve_out(out, &cfg)?;
            runner::cmd_train(&cfg, &out)
        }
        Cmd::Benchmark { config, out } => {
            let cfg = config::load_run_config(&config)?;
            let out = config::resolve_out(out, &cfg)?;
            bench::cmd_benchmark(&cfg, &out)
        }
        Cmd::ParamCount { model, dims } => cmd_param_count(model, dims),
        Cmd::StepDemo { out, seed } => stepdemo::cmd_step_demo(&out, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let threads = match worker_threads() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            return ExitCode::from(e.code);
        }
    };
    // The same cap governs data-parallel kernels inside the core, unless the
    // user pinned that knob separately.
    if std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", threads.to_string());
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
