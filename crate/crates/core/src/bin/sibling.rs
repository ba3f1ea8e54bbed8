//! Command-line front end for the experiment pipeline.
//!
//! Every failure prints a single line to stderr of the form
//! `E_<CLASS>: <message>` and exits with a class-specific nonzero status:
//! E_CONFIG=2, E_IO=3, E_FORMAT=4, E_MISSING_ARTIFACT=5, E_DOMAIN=6.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sibling_core::config::{ConfigError, ExperimentConfig};
use sibling_core::pipeline::{
    cmd_attack, cmd_calibrate, cmd_evaluate, cmd_gen_data, cmd_report, cmd_train, Algorithm,
    PipelineError,
};

#[derive(Parser)]
#[command(
    name = "sibling",
    about = "Transferable impersonation attacks on face models via a multi-task surrogate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON experiment config.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (defaults to the config's output_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for per-pair parallelism. Outputs do not depend on
    /// this value.
    #[arg(long, value_name = "N", default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic face dataset cache.
    GenData(CommonArgs),
    /// Train the surrogate, black-box targets, and white-box baselines.
    Train(CommonArgs),
    /// Calibrate per-model decision thresholds on held-out impostor pairs.
    Calibrate(CommonArgs),
    /// Run one attack arm over the configured impostor pairs.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        /// One of: pgd_single, pgd_ensemble, mifgsm, basic_joint, jtmo, sibling.
        #[arg(long, value_name = "NAME")]
        algorithm: String,
    },
    /// Score all attack archives and write the report CSV and markdown table.
    Evaluate(CommonArgs),
    /// Export perturbation/saliency images and loss-vs-iteration traces.
    Report(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::GenData(c)
            | Command::Train(c)
            | Command::Calibrate(c)
            | Command::Evaluate(c)
            | Command::Report(c) => c,
            Command::Attack { common, .. } => common,
        }
    }
}

/// `SIBLING_SEED` overrides the config's attack seed (smoke-test hook).
fn seed_override() -> Result<Option<u64>, String> {
    match std::env::var("SIBLING_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|e| format!("SIBLING_SEED must be an unsigned integer, got {text:?}: {e}")),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err("SIBLING_SEED is not valid unicode".to_string())
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let common = cli.command.common();
    let cfg = ExperimentConfig::load(&common.config)?;
    let root = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    match &cli.command {
        Command::GenData(_) => cmd_gen_data(&cfg, &root),
        Command::Train(_) => cmd_train(&cfg, &root),
        Command::Calibrate(_) => cmd_calibrate(&cfg, &root),
        Command::Attack { common, algorithm } => {
            let alg = Algorithm::parse(algorithm)?;
            let seed = seed_override().map_err(|message| {
                PipelineError::Config(ConfigError::Invalid {
                    json_path: "SIBLING_SEED (environment)".to_string(),
                    message,
                })
            })?;
            cmd_attack(&cfg, &root, alg, common.workers, seed)
        }
        Command::Evaluate(_) => cmd_evaluate(&cfg, &root),
        Command::Report(_) => cmd_report(&cfg, &root),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Single machine-parsable line: code prefix, then the message
            // flattened onto one line.
            let message = err.to_string().replace('\n', " ");
            eprintln!("{}: {}", err.code(), message);
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
