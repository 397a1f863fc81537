//! `hgch`: prepare datasets, train, evaluate, export embeddings and check gradients.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hgch::model::Stage;
use hgch::training::EvalSplit;

use config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "hgch", version, about = "Hyperbolic graph-convolution recommender")]
struct Cli {
    /// Worker threads for sampling and evaluation (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log verbosity; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest raw TSVs, add geographic neighbors, take the k-core and split.
    Prepare {
        /// Dataset manifest (TOML).
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the processed dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a self-describing run directory.
    Train {
        /// Run configuration (TOML); flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rank held-out interactions with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Processed dataset directory the checkpoint was trained on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: EvalSplit,
        /// Cut-offs, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [10, 20])]
        ks: Vec<usize>,
        /// Report directory (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one CSV row of ball coordinates per node.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "final")]
        stage: Stage,
    },
    /// Compare reverse-mode gradients of the full loss with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Run configuration whose model section is checked.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding size of the check instance.
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    fusion: Option<hgch::model::Fusion>,
    #[arg(long)]
    aggregation: Option<hgch::model::Aggregation>,
    /// Parameter draw seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Single-precision adjoints (tolerance 1e-2).
    #[arg(long)]
    float32: bool,
    /// Corrupt the adjoint of one primitive, e.g. `sigmoid`.
    #[arg(long)]
    inject_fault: Option<String>,
}

/// Exit status with a message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<hgch::Error> for Failure {
    fn from(e: hgch::Error) -> Self {
        use hgch::Error as E;
        let code = match &e {
            E::Config(_) | E::InvalidArgument(_) => EXIT_USAGE,
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        let mut message = e.to_string();
        if let E::NonFiniteLoss { triplets, .. } = &e {
            for (r, a, p, n) in triplets {
                message.push_str(&format!("\n  {r}: anchor {a}, positive {p}, negative {n}"));
            }
        }
        Failure { code, message }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be ≥ 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Prepare { manifest, out } => commands::prepare(&manifest, &out),
        Command::Train { config, overrides } => commands::train(config.as_deref(), &overrides),
        Command::Eval {
            checkpoint,
            data,
            split,
            ks,
            out,
        } => commands::eval(&checkpoint, &data, split, &ks, out.as_deref()),
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
            stage,
        } => commands::export(&checkpoint, &data, &out, stage),
        Command::GradCheck(a) => commands::grad_check(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
