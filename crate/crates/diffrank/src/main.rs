use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use diffrank::pipeline::{Pipeline, PipelineError, Stage};

/// Calibrate question difficulty, train the difficulty ranker and evaluate
/// robustness to rewritten benchmarks.
#[derive(Debug, Parser)]
#[command(name = "diffrank", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stage to run, or `all`.
    #[arg(long, default_value = "all")]
    stage: String,
    /// Use deterministic mock backends instead of HTTP.
    #[arg(long)]
    mock: bool,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let stages = if cli.stage == "all" {
        None
    } else {
        Some(Stage::parse(&cli.stage).ok_or_else(|| {
            let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
            PipelineError::Config(format!("unknown stage `{}`; expected all or one of {}", cli.stage, names.join(", ")))
        })?)
    };
    let pipeline = Pipeline::from_file(&cli.config, cli.out.clone(), cli.seed, cli.mock)?;
    let manifests = match stages {
        None => pipeline.run_all()?,
        Some(s) => vec![pipeline.run(s)?],
    };
    for m in manifests {
        eprintln!("{}: {} output(s) in {}", m.stage, m.outputs.len(), pipeline.out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
