//! `longer` command-line front end.
//!
//! Exit codes: `0` success, `2` config or schema error, `3` numerical
//! abort, `4` fingerprint mismatch, `1` anything else.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "longer", version, about = "Long-sequence recommender transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Model-config overrides shared by train, bench and sweep. A flag beats
/// the config file, which beats the built-in default.
#[derive(Args, Debug, Default, Clone)]
pub struct ModelFlags {
    /// Model config JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub item_dim: Option<usize>,
    #[arg(long)]
    pub merge_factor: Option<usize>,
    /// `concat` or `inner_trans`.
    #[arg(long)]
    pub merge_mode: Option<String>,
    /// Strategy and count, e.g. `recent26`, `uniform16`, `learnable8`, `recent13+uniform13`.
    #[arg(long)]
    pub query_strategy: Option<String>,
    #[arg(long)]
    pub self_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training shuffle seed.
    #[arg(long)]
    pub train_seed: Option<u64>,
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (JSONL, `.gz` optional).
    Gen {
        /// Generator config JSON; every field is required.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_users: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a temporal split and write a checkpoint.
    Train {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Expected model config; a mismatch with the checkpoint fails.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also train and evaluate a baseline on the same split (`sumpooling`).
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Naive versus cached serving cost and wall time.
    Bench {
        #[command(flatten)]
        model: ModelFlags,
        /// Score with a trained checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        candidates: usize,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        /// Run the full forward on both sides.
        #[arg(long)]
        no_cache: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic FLOPs of vanilla versus merged attention.
    Cost {
        #[arg(long, default_value_t = 2048)]
        seq_len: u64,
        #[arg(long, default_value_t = 32)]
        dim: u64,
        #[arg(long, default_value_t = 4)]
        merge: u64,
        #[arg(long, default_value_t = 1)]
        inner_layers: u64,
        /// Also itemize the parameters and serving cost of this model config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON output; the table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit `y = α·x^β + γ` to a CSV with columns `x,y`.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One model per grid point, then a power-law fit of AUC.
    Sweep {
        /// Sweep config JSON: generator, data_seed, model, axis, values.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        query_strategy: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score JSONL requests with the two-stage cache.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose most recent sample per user supplies the history.
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        requests: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen {
            config,
            seed,
            n_users,
            out,
        } => commands::gen(config.as_deref(), seed, n_users, &out),
        Command::Train { model, data, out } => commands::train(&model, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            config,
            baseline,
            out,
        } => commands::eval(&checkpoint, &data, config.as_deref(), baseline.as_deref(), &out),
        Command::Bench {
            model,
            checkpoint,
            users,
            candidates,
            repetitions,
            no_cache,
            seed,
            out,
        } => commands::bench(
            &model,
            checkpoint.as_deref(),
            commands::BenchArgs {
                users,
                candidates,
                repetitions,
                use_cache: !no_cache,
                seed,
            },
            &out,
        ),
        Command::Cost {
            seq_len,
            dim,
            merge,
            inner_layers,
            config,
            out,
        } => commands::cost(seq_len, dim, merge, inner_layers, config.as_deref(), out.as_deref()),
        Command::Fit { input, out } => commands::fit(&input, out.as_deref()),
        Command::Sweep {
            config,
            query_strategy,
            out,
        } => commands::sweep(&config, query_strategy.as_deref(), &out),
        Command::Score {
            checkpoint,
            history,
            requests,
            out,
        } => commands::score(&checkpoint, &history, &requests, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
