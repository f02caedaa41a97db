//! Command-line front end for geoflow.
//!
//! Exit codes: 0 on success, 1 when a computation fails numerically, 2 for
//! usage, configuration and file errors.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use geoflow::GeoError;

use crate::config::{Resolved, RunConfig, SEED_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 1,
        }
    }
}

impl From<GeoError> for CliError {
    fn from(e: GeoError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "geoflow", version, about = "Generative geolocation with exact densities")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Config file of `section.key = value` lines.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Shortcut for `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Shortcut for `run.out`.
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
    /// Shortcut for `run.threads`.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Shortcut for `model.checkpoint`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Shortcut for `data.train`.
    #[arg(long, global = true)]
    pub train: Option<PathBuf>,
    /// Shortcut for `data.eval`.
    #[arg(long, global = true)]
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic train/eval pair with known ground truth.
    Synth,
    /// Train a generative model or a vMF baseline.
    Train {
        /// Continue from the saved training state.
        #[arg(long)]
        resume: bool,
    },
    /// Predict one location per eval item.
    Sample,
    /// Geolocation and probabilistic metrics on the eval set.
    Eval,
    /// Equirectangular raster of log2-densities for one conditioning.
    DensityGrid,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train { .. } => "train",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::DensityGrid => "density-grid",
        }
    }
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for kv in &cli.global.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let g = &cli.global;
    let path = |p: &PathBuf| p.display().to_string();
    let shortcuts = [
        ("run.seed", g.seed.map(|s| s.to_string())),
        ("run.out", g.out.as_ref().map(path)),
        ("run.threads", g.threads.map(|t| t.to_string())),
        ("model.checkpoint", g.checkpoint.as_ref().map(path)),
        ("data.train", g.train.as_ref().map(path)),
        ("data.eval", g.eval.as_ref().map(path)),
    ];
    for (k, v) in shortcuts {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    }
    if let Command::Train { resume: true } = cli.command {
        out.push(("train.resume".into(), "true".into()));
    }
    Ok(out)
}

/// Resolves the configuration and runs one command.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let env_seed = std::env::var(SEED_ENV).ok().filter(|s| !s.is_empty());
    let resolved = Resolved::build(cli.global.config.as_deref(), &overrides(cli)?, env_seed)?;
    let cfg = RunConfig::from_resolved(&resolved)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| commands::run(cli.command, &cfg, &resolved))
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("geoflow {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
