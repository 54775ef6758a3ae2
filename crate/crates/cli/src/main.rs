//! `blora`: train gated adapters on synthetic tasks, audit MAC/BOP counts
//! and tabulate run reports.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
//! 3 numerical failure during training.

mod audit;
mod output;
mod report;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "blora", version, about = "Learnable bitwidths and adapter ranks at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model per seed and write a report and CSV for each.
    Train(TrainArgs),
    /// Count MACs and BOPs of a configuration against a baseline.
    Audit(AuditArgs),
    /// Tabulate effective ranks and decided bitwidths from a run report.
    Report(ReportArgs),
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds; defaults to the config's seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output directory; falls back to the config's out_dir, then `runs`.
    #[arg(long, env = "BLORA_OUT_DIR")]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Relative BOPs of the reference adapter configurations.
    Table2,
    /// Trainable-parameter counts of the reference encoder.
    Params,
}

#[derive(Debug, clap::Args)]
#[command(group(ArgGroup::new("input").required(true).args(["config", "report", "preset"])))]
struct AuditArgs {
    /// Audit configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run report whose learned ranks and bitwidths are audited.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Built-in reference audit.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Baseline: an audit config or run report path, or `full-precision`
    /// for a report's configured rank at 32 bits.
    #[arg(long)]
    baseline: Option<String>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Also write the JSON result here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing --out file.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, clap::Args)]
struct ReportArgs {
    /// Run report (JSON).
    path: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train::run(&a),
        Command::Audit(a) => audit::run(&a),
        Command::Report(a) => report::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
