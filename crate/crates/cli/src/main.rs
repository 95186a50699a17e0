#![allow(clippy::neg_cmp_op_on_partial_ord)]
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

mod config;
mod run;

use config::{Mode, Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), msg: e.to_string() }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Silhouette-based position and orientation reconstruction of particles.
#[derive(Debug, Parser)]
#[command(name = "silhouette-pose", version)]
struct Args {
    mode: Mode,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of processors.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let o = Overrides { seed: args.seed, workers: args.workers, out: args.out };
    let result = RunConfig::load(&args.config, args.mode, &o).and_then(|cfg| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cfg.workers {
            pool = pool.num_threads(n);
        }
        let pool = pool.build().map_err(|e| CliError::Run(format!("thread pool: {e}")))?;
        pool.install(|| run::run(&cfg))
    });
    match result {
        Ok(files) => {
            log::info!("{} mode finished, {} files written", args.mode, files.len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{} mode failed: {e}", args.mode);
            ExitCode::from(e.exit_code())
        }
    }
}
