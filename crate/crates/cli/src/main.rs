use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use dendroclim_cli::{run_pipeline, PipelineError, RunConfig, Stage};

/// Bayesian tree-ring growth and climate-sensitivity pipeline.
#[derive(Debug, Parser)]
#[command(name = "dendroclim", version)]
struct Args {
    /// TOML run configuration; defaults apply to anything not set.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated stages (simulate, water-balance, select, fit-fce,
    /// fit-vce, classify, report) or `all`.
    #[arg(long)]
    stages: Option<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel chains.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(args: Args) -> Result<i32, PipelineError> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(format!("threads: {e}")))?;
    }
    let stages = match &args.stages {
        Some(s) => Stage::parse_list(s)?,
        None => Stage::defaults_for(&config),
    };
    let outcome = run_pipeline(&config, &stages)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
