//! `seqrec`: prepare data, train, evaluate, export attention maps and run
//! the acceptance suite.
//!
//! Exit codes: 0 success, 1 user error (bad input, paths, configuration),
//! 2 internal failure (a broken invariant or a failed acceptance criterion).

mod artifacts;
mod commands;
mod error;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use seqrec::data::Target;
use seqrec::RankingMode;

#[derive(Parser)]
#[command(name = "seqrec", version, about = "Self-attention sequential recommendation with attention refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and split an interaction log (or generate a synthetic one).
    Prepare(PrepareArgs),
    /// Train a model described by a TOML run config.
    Train(TrainArgs),
    /// Rank held-out items with a trained checkpoint.
    Eval(EvalArgs),
    /// Write one head's attention maps for a user as CSV and PNG.
    ExportAttention(ExportArgs),
    /// Run the acceptance suite.
    Bench(BenchArgs),
    /// Print metrics files side by side.
    Table(TableArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Interaction CSV with user, item and timestamp columns.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Directory receiving dataset.json and stats.json.
    #[arg(long)]
    pub output: PathBuf,
    /// Minimum interactions per user and occurrences per item.
    #[arg(long, default_value_t = 5)]
    pub min_core: usize,
    /// Longest input sequence the model will see.
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    #[arg(long, default_value = "user_id")]
    pub user_column: String,
    #[arg(long, default_value = "item_id")]
    pub item_column: String,
    #[arg(long, default_value = "timestamp")]
    pub timestamp_column: String,
    /// Largest tolerated fraction of unparseable rows.
    #[arg(long, default_value_t = 0.01)]
    pub max_malformed: f64,
    /// Generate sequences with a planted second-order rule instead of
    /// reading a CSV.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, default_value_t = 1000, requires = "synthetic")]
    pub users: usize,
    #[arg(long, default_value_t = 200, requires = "synthetic")]
    pub items: usize,
    #[arg(long, default_value_t = 30, requires = "synthetic")]
    pub seq_len: usize,
    /// Probability that an item follows the planted rule.
    #[arg(long, default_value_t = 0.8, requires = "synthetic")]
    pub strength: f64,
    #[arg(long, default_value_t = 2024, requires = "synthetic")]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set model.mechanism=simp`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue an interrupted run from its last completed epoch.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Valid,
    Test,
}

impl From<SplitArg> for Target {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Valid => Target::Valid,
            SplitArg::Test => Target::Test,
        }
    }
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prepared dataset; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
    pub topn: Vec<usize>,
    /// `full` or `sampled:K`.
    #[arg(long, default_value = "full")]
    pub mode: RankingMode,
    /// Seed for negative sampling in sampled mode.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics JSON path [default: metrics-<split>.json next to the
    /// checkpoint].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Raw user id as it appeared in the input.
    #[arg(long)]
    pub user: String,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    /// Number of most recent positions to show.
    #[arg(long, default_value_t = seqrec::export::DEFAULT_LAST)]
    pub last: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Suite {
    Acceptance,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "acceptance")]
    pub suite: Suite,
    /// Run only these criteria.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<u8>,
    /// Also write the results as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub tamper_gradient: bool,
}

#[derive(Args)]
pub struct TableArgs {
    /// Metrics JSON files written by `train` or `eval`.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    /// Row labels, in order [default: derived from the file paths].
    #[arg(long)]
    pub label: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::ExportAttention(a) => commands::export_attention(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Table(a) => commands::table(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
