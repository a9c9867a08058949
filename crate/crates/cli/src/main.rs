//! `selfablate`: train, evaluate and analyse self-ablating transformers.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfablate::model::Site;

#[derive(Parser)]
#[command(
    name = "selfablate",
    version,
    about = "Self-ablating transformer training and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Clean-path perplexity of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Strip gate projections, leaving a standard transformer checkpoint.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record activations at one site over a corpus.
    Record(RecordArgs),
    /// Sparse autoencoder training and evaluation.
    #[command(subcommand)]
    Sae(SaeCommand),
    /// Generate indirect-object prompts with clean/corrupt pairs.
    IoiGen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with `names`, `places` and `objects` arrays.
        #[arg(long)]
        pools: Option<PathBuf>,
    },
    /// Prune the component graph on IOI prompts.
    Circuit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 0.03)]
        tau: f64,
        /// Graph JSON; a Graphviz rendering is written next to it with a `.dot` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Weight and activation L1 norms.
    Metrics(EvalArgs),
    /// Write a deterministic synthetic story corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint with optimizer state to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Evaluate at most this many windows (0 = all).
    #[arg(long, default_value_t = 0)]
    max_windows: usize,
}

#[derive(Args)]
struct RecordArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "mlp_out")]
    site: Site,
    /// Block index; defaults to the penultimate block.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SaeCommand {
    /// Train an SAE on a recorded activation file.
    Train {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Schedule preset: `desk` or `reference`.
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step training log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// CE score and L0 of an SAE spliced into its checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sae: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        max_windows: usize,
    },
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SA_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
