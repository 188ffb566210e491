//! `fino` command-line driver.
//!
//! Exit codes: 0 on success, 1 when a check or a training run fails, 2 on
//! usage errors (bad flags, unreadable or invalid config).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fino::envs::EnvKind;

#[derive(Debug, Parser)]
#[command(
    name = "fino",
    version,
    about = "Noise-injected flow-matching policies for offline-to-online RL",
    arg_required_else_help = true,
    after_help = "Settings are resolved as: built-in defaults, then the --config file, then flags.\n\
                  Log verbosity comes from FINO_LOG_LEVEL (error, info or debug)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the offline dataset (`dataset.bin` and `dataset.csv`).
    GenDataset(CommonArgs),
    /// Offline pre-training; writes the `agent/` checkpoint and `offline_metrics.jsonl`.
    TrainOffline(CommonArgs),
    /// Online fine-tuning from `agent/`; writes `agent_online/`, `online_metrics.jsonl`,
    /// `visitation.csv` and `temperature.csv`.
    FinetuneOnline(CommonArgs),
    /// Evaluate the latest checkpoint; writes `eval.json`.
    Eval(CommonArgs),
    /// Run numerical checks; writes `verify.jsonl`.
    Verify(VerifyArgs),
    /// Export the flow's log-density on a grid to `log_density.csv`.
    ExportPlot(CommonArgs),
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independent runs with seeds `seed, seed + 1, ...`, each under `<out>/seed_<s>/`.
    #[arg(long)]
    seeds: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Environment: four-circles, rightward or point-maze.
    #[arg(long)]
    env: Option<EnvKind>,
    /// Noise-injection level in [0, 1].
    #[arg(long)]
    eta: Option<f64>,
    /// Dataset size for gen-dataset, gradient steps for the training commands,
    /// episodes for eval, samples for export-plot.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Check {
    ConditionalPath,
    VarianceOrdering,
    SinglePoint,
    TargetNoise,
    All,
}

#[derive(Debug, Clone, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Which check to run.
    #[arg(long, value_enum, default_value = "all")]
    check: Check,
}

fn init_logging() -> Result<(), String> {
    let level = std::env::var("FINO_LOG_LEVEL").unwrap_or_else(|_| "error".into());
    if !matches!(level.as_str(), "error" | "info" | "debug") {
        return Err(format!(
            "FINO_LOG_LEVEL must be error, info or debug, got '{level}'"
        ));
    }
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
