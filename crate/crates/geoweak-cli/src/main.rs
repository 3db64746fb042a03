//! Command-line entry point: school-detection pipeline stages driven by a
//! TOML run configuration. Exit code 2 marks configuration errors, 1
//! everything else; failures print one line plus a log pointer.

mod config;
mod demo;
mod runlog;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use geoweak::Error;

use crate::config::RunConfig;
use crate::demo::DemoArgs;
use crate::runlog::RunLog;
use crate::stages::{Ctx, TuneArgs};

#[derive(Parser)]
#[command(
    name = "geoweak",
    version,
    about = "Weakly supervised school detection: imagery to labels to detectors to metrics"
)]
struct Cli {
    /// Run configuration TOML (required by every pipeline subcommand).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to paths.artifacts_dir from the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Training seed, overriding seeds.train.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load points, fetch optional background queries, dedupe and space.
    FetchPoints,
    /// Fetch and cache one tile per point.
    FetchTiles,
    /// Calibrate color thresholds and drop implausible school tiles.
    Filter,
    /// Turn kept tiles into detection labels via prompt segmentation.
    Autolabel,
    /// Assemble auto and golden datasets, split them, carve regimes.
    BuildDataset,
    /// Two-stage training on one regime.
    Train {
        /// Regime total size; defaults to the largest configured.
        #[arg(long)]
        regime: Option<usize>,
        /// full, skip_pretrain, or skip_finetune.
        #[arg(long, default_value = "full")]
        mode: String,
    },
    /// Hyperparameter search against the golden validation split.
    Tune {
        #[arg(long)]
        budget: Option<usize>,
        /// f1 or map50.
        #[arg(long)]
        metric: Option<String>,
        /// Builtin space name or a TOML space file.
        #[arg(long)]
        space: Option<String>,
    },
    /// Detection metrics of a trained model on the golden test split.
    Evaluate {
        #[arg(long)]
        regime: Option<usize>,
        #[arg(long, default_value = "full")]
        mode: String,
    },
    /// Comparison table and regime plots across all evaluations.
    Report,
    /// Full offline pipeline on a generated corpus with the mock detector.
    E2eDemo {
        /// Probability the mock detector misses each ground-truth box.
        #[arg(long, default_value_t = 0.0)]
        drop_rate: f64,
        /// Reuse a previously generated corpus directory.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

struct Failure {
    error: Error,
    log: Option<PathBuf>,
}

impl Failure {
    fn bare(error: Error) -> Self {
        Failure { error, log: None }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure.log {
                Some(log) => eprintln!("error: {} (log: {})", failure.error, log.display()),
                None => eprintln!("error: {}", failure.error),
            }
            match failure.error {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    if let Command::E2eDemo { drop_rate, corpus } = &cli.command {
        let run_dir = cli
            .run_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("geoweak-demo"));
        let args = DemoArgs {
            drop_rate: *drop_rate,
            corpus: corpus.clone(),
        };
        return demo::e2e_demo(&run_dir, cli.seed.unwrap_or(7), &args)
            .map(|_| ())
            .map_err(|error| Failure {
                error,
                log: Some(run_dir.join("run.log")),
            });
    }

    let config_path = cli.config.as_ref().ok_or_else(|| {
        Failure::bare(Error::Config("pass --config <file> to pipeline subcommands".into()))
    })?;
    let config = RunConfig::load(config_path).map_err(Failure::bare)?;
    let run_dir = cli
        .run_dir
        .clone()
        .unwrap_or_else(|| config.paths.artifacts_dir.clone());
    let log = RunLog::open(&run_dir).map_err(Failure::bare)?;
    let ctx = Ctx {
        config: &config,
        log: &log,
        train_seed: cli.seed.unwrap_or(config.seeds.train),
    };

    let result = match &cli.command {
        Command::FetchPoints => stages::fetch_points(&ctx),
        Command::FetchTiles => stages::fetch_tiles(&ctx),
        Command::Filter => stages::filter(&ctx),
        Command::Autolabel => stages::autolabel(&ctx),
        Command::BuildDataset => stages::build_dataset(&ctx),
        Command::Train { regime, mode } => stages::select_regime(&config, *regime)
            .and_then(|sel| Ok((sel, stages::parse_train_mode(mode)?)))
            .and_then(|(sel, mode)| stages::train(&ctx, sel, mode)),
        Command::Tune { budget, metric, space } => {
            let args = TuneArgs {
                budget: *budget,
                metric: metric.clone(),
                space: space.clone(),
            };
            stages::tune(&ctx, &args)
        }
        Command::Evaluate { regime, mode } => stages::select_regime(&config, *regime)
            .and_then(|sel| Ok((sel, stages::parse_train_mode(mode)?)))
            .and_then(|(sel, mode)| stages::evaluate_stage(&ctx, sel, mode)),
        Command::Report => stages::report(&ctx),
        Command::E2eDemo { .. } => unreachable!("handled above"),
    };
    result.map_err(|error| {
        let _ = log.fail(&error.to_string());
        Failure {
            error,
            log: Some(log.log_path().to_path_buf()),
        }
    })
}
