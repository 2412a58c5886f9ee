//! Command-line front end: `generate`, `train`, `eval` and `bench`.
//!
//! Every command resolves its settings from built-in defaults, then an
//! optional `--config` file of `key = value` lines, then flags. The sorted
//! resolved settings are hashed and recorded with the seed in every output.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
pub mod config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<spotlight::Error> for CliError {
    fn from(e: spotlight::Error) -> Self {
        use spotlight::Error as E;
        let code = match e {
            E::NonFinite(_) | E::Diverged { .. } => EXIT_NUMERIC,
            E::Config(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "spotlight", version, about = "Learned-hash top-k KV retrieval pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic two-cone query/key dump (SPLQ).
    Generate(GenerateArgs),
    /// Train a hasher on a dump and write an SPLH checkpoint.
    Train(TrainArgs),
    /// Compare retrieval methods against oracle top-k.
    Eval(EvalArgs),
    /// Time bit packing and code scans.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// key = value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    n_queries: Option<usize>,
    #[arg(long)]
    n_keys: Option<usize>,
    /// Cone half-angle in radians.
    #[arg(long)]
    spread: Option<f64>,
    /// Cosine between the query and key cone axes.
    #[arg(long, allow_negative_numbers = true)]
    axis_cos: Option<f64>,
    #[arg(long)]
    norm_mean: Option<f64>,
    #[arg(long)]
    norm_std: Option<f64>,
    #[arg(long)]
    outlier_rate: Option<f64>,
    #[arg(long)]
    outlier_scale: Option<f64>,
    /// Output dump path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Token-aligned training dump.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Dump used for the final IoU check.
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Checkpoint path; the report goes to `<out>.report.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// mlp | linear | downproj
    #[arg(long)]
    hasher: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Dimension reduction factor of the down-projection estimator.
    #[arg(long)]
    reduction: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// ranking | recon
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long)]
    maskout: Option<f64>,
    /// Cap on top positions per query, or `none`.
    #[arg(long)]
    max_top: Option<String>,
    /// Cap on non-top positions per query, or `none`.
    #[arg(long)]
    max_oth: Option<String>,
    /// Query rows per sequence, or `none` for all eligible rows.
    #[arg(long)]
    query_subsample: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print progress every N iterations (0 disables).
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Trained checkpoint to evaluate; repeatable.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Comma-separated built-in methods: oracle, lsh, mlp, downproj
    /// (the last three are untrained, seeded baselines).
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated budget rates; k = max(floor(rate * n), 20).
    #[arg(long)]
    budget_rate: Option<String>,
    /// Comma-separated explicit budgets; overrides rates when set.
    #[arg(long)]
    budget: Option<String>,
    /// Attach seeded Gaussian values and report output error.
    #[arg(long)]
    values: Option<bool>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-query IoU CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated code counts.
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    budget_rate: Option<f64>,
    /// Refuse sizes whose buffers exceed this many MiB.
    #[arg(long)]
    memory_limit_mb: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional CSV path; the table is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
