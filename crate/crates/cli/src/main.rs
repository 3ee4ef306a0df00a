use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chime_cli::commands;
use chime_cli::config::RunConfig;
use chime_cli::pipeline::resolve_out_dir;
use chime_core::ChimeError;

/// Exit codes are a stable scripting contract: 0 success, 2 user/config
/// error, 3 numerical abort, 4 checkpoint incompatibility.
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "chime",
    version,
    about = "Multi-scale conditional time-series diffusion: train, sample, forecast, evaluate, ablate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// Path to a run-config JSON (see schema/runconfig.schema.json).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name (sines-smoke, fewshot-demo).
    #[arg(long)]
    preset: Option<String>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigSource {
    fn load(&self) -> Result<RunConfig, ChimeError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => RunConfig::from_path(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            _ => {
                return Err(ChimeError::Config(
                    "provide exactly one of --config <path> or --preset <name>".into(),
                ))
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the full pipeline (hallucination bank first when enabled).
    Train {
        #[command(flatten)]
        source: ConfigSource,
    },
    /// Sample n windows from a checkpoint and score them against held-out data.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Forecast from the trailing lookback of a CSV.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input CSV providing at least the lookback window.
        #[arg(long)]
        input: PathBuf,
        /// Horizon; defaults to the checkpoint's trained horizon.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute metrics for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every configured ablation row and merge one table.
    Ablate {
        #[command(flatten)]
        source: ConfigSource,
    },
    /// Train only the hallucination bank.
    HallucinateTrain {
        #[command(flatten)]
        source: ConfigSource,
    },
}

fn run(cli: Cli) -> Result<(), ChimeError> {
    match cli.command {
        Command::Train { source } => {
            let cfg = source.load()?;
            let out = resolve_out_dir(&cfg, source.out.as_deref());
            commands::cmd_train(&cfg, &out)
        }
        Command::Generate {
            checkpoint,
            n,
            out,
            seed,
        } => commands::cmd_generate(&checkpoint, n, &out, seed),
        Command::Forecast {
            checkpoint,
            input,
            horizon,
            out,
            seed,
        } => commands::cmd_forecast(&checkpoint, &input, horizon, &out, seed),
        Command::Eval {
            checkpoint,
            out,
            seed,
        } => commands::cmd_eval(&checkpoint, &out, seed),
        Command::Ablate { source } => {
            let cfg = source.load()?;
            let out = resolve_out_dir(&cfg, source.out.as_deref());
            commands::cmd_ablate(&cfg, &out)
        }
        Command::HallucinateTrain { source } => {
            let cfg = source.load()?;
            let out = resolve_out_dir(&cfg, source.out.as_deref());
            commands::cmd_hallucinate_train(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                ChimeError::Numerical { .. } => EXIT_NUMERICAL,
                ChimeError::Checkpoint(_) => EXIT_CHECKPOINT,
                _ => EXIT_CONFIG,
            };
            ExitCode::from(code)
        }
    }
}
