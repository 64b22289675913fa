use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Pre-train a global text autoencoder once, then plug in small
/// per-condition VAEs for conditional generation.
#[derive(Debug, Parser)]
#[command(name = "ppvae", version)]
pub struct Cli {
    /// TOML config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Checkpoint root (defaults to the config file, then $PPVAE_CHECKPOINT_ROOT, then ./checkpoints).
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the global autoencoder on unlabeled sentences.
    Pretrain(PretrainArgs),
    /// Train one plugin per condition against a pretrain checkpoint.
    TrainPlugin(TrainPluginArgs),
    /// Generate sentences for conditions (or unconditionally).
    Generate(GenerateArgs),
    /// Score generated sentences.
    Evaluate(EvaluateArgs),
    /// Write a seeded toy corpus covering every length bin.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// One sentence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory (default: <root>/pretrain).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Starting sizes: `full` or `small`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub d_g: Option<usize>,
    #[arg(long)]
    pub emb_dim: Option<usize>,
    #[arg(long)]
    pub gru_hidden: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub dec_heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub disc_hidden: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainPluginArgs {
    /// Pretrain checkpoint (default: <root>/pretrain).
    #[arg(long)]
    pub pretrain: Option<PathBuf>,
    /// `label<TAB>sentence` per line.
    #[arg(long)]
    pub labeled: PathBuf,
    /// Conditions to train; repeat the flag or separate with commas.
    #[arg(long = "condition", required = true, value_delimiter = ',')]
    pub conditions: Vec<String>,
    /// Plugins are written to <out>/<condition> (default: <root>/plugins).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta_max: Option<f64>,
    #[arg(long)]
    pub beta_warmup: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d_c: Option<usize>,
    /// Cap the negative term at this multiple of the positive loss.
    #[arg(long)]
    pub neg_clamp: Option<f64>,
    /// Train on positives only.
    #[arg(long, conflicts_with = "use_negatives")]
    pub no_negatives: bool,
    #[arg(long)]
    pub use_negatives: bool,
    /// Draw as many negatives as positives instead of using all of them.
    #[arg(long)]
    pub balance_negatives: bool,
    #[arg(long)]
    pub n_per_condition: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub pretrain: Option<PathBuf>,
    /// Plugin checkpoint directories.
    #[arg(long = "plugin", conflicts_with = "unconditional")]
    pub plugins: Vec<PathBuf>,
    /// Conditions whose plugins live under <root>/plugins.
    #[arg(long = "condition", value_delimiter = ',', conflicts_with = "unconditional")]
    pub conditions: Vec<String>,
    /// Sample the global prior directly.
    #[arg(long)]
    pub unconditional: bool,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Write JSON lines `{condition, seed_index, text}` instead of plain lines.
    #[arg(long)]
    pub jsonl: bool,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSON-lines output of `generate`, or `CONDITION=PATH` for plain lines.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<String>,
    /// `length` (rule-based) or `classifier`.
    #[arg(long, default_value = "length")]
    pub task: String,
    /// Labeled data for training the classifier.
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the JSON report here (default: after the table on stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub unlabeled: usize,
    #[arg(long, default_value_t = 200)]
    pub per_condition: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(ppvae_core::Error),
}

impl From<ppvae_core::Error> for CliError {
    fn from(e: ppvae_core::Error) -> Self {
        match e {
            ppvae_core::Error::Config(m) => CliError::Usage(m),
            ppvae_core::Error::UnknownCondition(c) => CliError::Usage(format!("unknown condition: {c}")),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
