//! `distgp`: train, evaluate, score and audit DistGP networks from JSON
//! run configs.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distgp::training::Task;

use commands::{AuditOptions, OodOptions, PredictOptions, TrainOverrides};
use exit::Failure;

#[derive(Parser, Debug)]
#[command(name = "distgp", version, about = "Distributional GP networks: train, eval, ood, audit")]
struct Cli {
    /// Worker threads for batched prediction and audits. DISTGP_THREADS
    /// takes precedence when set.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a run config.
    Train {
        config: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
        #[arg(long)]
        outputs: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Predict on a dataset and write per-example predictions.
    Eval {
        checkpoint: PathBuf,
        /// Dataset as JSON, e.g. '{"kind":"banana","n":500,"seed":3}'.
        /// Defaults to the training dataset.
        #[arg(long)]
        data: Option<String>,
        #[command(flatten)]
        predict: PredictArgs,
    },
    /// Score in-distribution against OOD data or rotated inputs.
    Ood {
        checkpoint: PathBuf,
        /// In-distribution dataset JSON; defaults to the training dataset.
        #[arg(long)]
        in_data: Option<String>,
        /// Out-of-distribution dataset JSON.
        #[arg(long)]
        ood_data: Option<String>,
        /// False-positive rates at which to place thresholds.
        #[arg(long, value_delimiter = ',', default_value = "0.05")]
        fpr: Vec<f64>,
        /// Rotation angles in degrees for a sweep over the in-distribution images.
        #[arg(long, value_delimiter = ',')]
        rotate: Vec<f64>,
        #[command(flatten)]
        predict: PredictArgs,
    },
    /// Lipschitz and feature-collapse audits. Runs both when neither is chosen.
    Audit {
        checkpoint: PathBuf,
        #[arg(long)]
        lipschitz: bool,
        #[arg(long)]
        collapse: bool,
        #[command(flatten)]
        audit: AuditArgs,
    },
    /// Same as `audit --collapse`.
    CollapseCheck {
        checkpoint: PathBuf,
        #[command(flatten)]
        audit: AuditArgs,
    },
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampled moment pairs per layer.
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_task(s: &str) -> Result<Task, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown task {s:?}"))
}

impl PredictArgs {
    fn options(&self) -> PredictOptions {
        PredictOptions { batch_size: self.batch_size, mc_samples: self.mc_samples, seed: self.seed }
    }
}

fn thread_count(flag: usize) -> Result<usize, Failure> {
    let n = match std::env::var("DISTGP_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| Failure::config(format!("DISTGP_THREADS={v:?} is not a count")))?,
        Err(_) => flag,
    };
    if n == 0 {
        return Err(Failure::config("thread count must be at least 1"));
    }
    Ok(n)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = thread_count(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Train { config, task, outputs, seed, max_steps, batch_size, learning_rate } => {
            let o = TrainOverrides { task, outputs, seed, max_steps, batch_size, learning_rate };
            let ckpt = commands::cmd_train(&config, &o)?;
            eprintln!("wrote {}", ckpt.display());
            Ok(())
        }
        Command::Eval { checkpoint, data, predict } => {
            commands::cmd_eval(&checkpoint, data.as_deref(), predict.out.as_deref(), &predict.options())
        }
        Command::Ood { checkpoint, in_data, ood_data, fpr, rotate, predict } => {
            let opts = OodOptions { in_data: in_data.as_deref(), ood_data: ood_data.as_deref(), fprs: fpr, rotations: rotate };
            commands::cmd_ood(&checkpoint, &opts, predict.out.as_deref(), &predict.options())
        }
        Command::Audit { checkpoint, lipschitz, collapse, audit } => {
            let opts = AuditOptions { lipschitz, collapse, pairs: audit.pairs, seed: audit.seed };
            commands::cmd_audit(&checkpoint, opts, audit.out.as_deref())
        }
        Command::CollapseCheck { checkpoint, audit } => {
            let opts = AuditOptions { lipschitz: false, collapse: true, pairs: audit.pairs, seed: audit.seed };
            commands::cmd_audit(&checkpoint, opts, audit.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::SUCCESS };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
