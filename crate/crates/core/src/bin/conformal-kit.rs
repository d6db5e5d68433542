use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conformal_kit::config::RunConfig;
use conformal_kit::pipeline::{Pipeline, Stage, StageError, StageResult};
use conformal_kit::Error;

/// Conformal prediction sets under distribution shift.
#[derive(Parser)]
#[command(name = "conformal-kit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic splits.
    Generate(Common),
    /// Train the classifier.
    Train(Common),
    /// Fit every configured calibrator.
    Calibrate(Common),
    /// Write prediction sets for the test split.
    Predict(Common),
    /// Coverage and set size over the configured alphas.
    Sweep(Common),
    /// Monte Carlo check of the coverage-gap decomposition.
    Verify(Common),
    /// Aggregate per-seed results.
    Report(Common),
    /// All stages for all seeds, then the report.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn pipeline(&self) -> StageResult<Pipeline> {
        let config_error = |source| StageError { stage: Stage::Config, source };
        let mut cfg = RunConfig::load(&self.config).map_err(config_error)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Pipeline::new(cfg)
    }
}

fn configure_threads() -> StageResult {
    let Ok(raw) = std::env::var("CONFORMAL_KIT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().map_err(|_| StageError {
        stage: Stage::Config,
        source: Error::Config(format!("CONFORMAL_KIT_THREADS must be a positive integer, got `{raw}`")),
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| StageError {
        stage: Stage::Config,
        source: Error::Config(e.to_string()),
    })
}

fn per_seed(p: &Pipeline, stage: impl Fn(&Pipeline, u64) -> StageResult) -> StageResult {
    for &seed in &p.config().seeds {
        stage(p, seed)?;
        eprintln!("seed {seed}: done");
    }
    Ok(())
}

fn execute(cli: Cli) -> StageResult {
    configure_threads()?;
    match cli.command {
        Command::Generate(c) => per_seed(&c.pipeline()?, Pipeline::generate),
        Command::Train(c) => per_seed(&c.pipeline()?, Pipeline::train),
        Command::Calibrate(c) => per_seed(&c.pipeline()?, Pipeline::calibrate),
        Command::Predict(c) => per_seed(&c.pipeline()?, Pipeline::predict),
        Command::Sweep(c) => per_seed(&c.pipeline()?, |p, s| p.sweep(s).map(drop)),
        Command::Verify(c) => per_seed(&c.pipeline()?, |p, s| p.verify(s).map(drop)),
        Command::Report(c) => {
            let p = c.pipeline()?;
            p.report()?;
            eprintln!("report written to {}", p.out_dir().display());
            Ok(())
        }
        Command::Run(c) => {
            let p = c.pipeline()?;
            p.run_all()?;
            eprintln!("run {} written to {}", p.config_hash(), p.out_dir().display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
