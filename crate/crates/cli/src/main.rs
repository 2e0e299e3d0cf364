//! `mptrec` command-line driver.
//!
//! Exit codes: 0 success, 1 user error (bad flags, config, inputs), 2
//! internal error (numerical failure, divergence).

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mptrec::model::FinetuneScheme;

#[derive(Parser, Debug)]
#[command(
    name = "mptrec",
    version,
    about = "Multi-task pre-training and prompt tuning for recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load the configured dataset and write its schema and label statistics.
    Ingest(RunArgs),
    /// Generate the configured synthetic dataset as CSV.
    Synth(RunArgs),
    /// Multi-task pre-training of an mpt_rec model.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Report whose test AUCs define the gains.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Joint training of a baseline architecture.
    TrainBaseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Prompt tuning of the configured new task on a pre-trained checkpoint.
    PromptTune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Frozen feature cache from `cache-build`.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Full-training report used for gains and retention.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Freeze manifest, one parameter name per line.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Frozen fine-tuning of a pre-trained baseline on the new task.
    FinetuneBaseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_scheme)]
        scheme: FinetuneScheme,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Test AUC of a checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-task AUC gains of run `a` over run `b`.
    Compare {
        /// Report file or run directory.
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Negative-transfer signs of joint runs against a pretrain run.
    SignTable {
        #[arg(long)]
        pretrain: PathBuf,
        /// Joint-training report or run directory; repeatable.
        #[arg(long = "joint", required = true)]
        joints: Vec<PathBuf>,
        /// Also write the table as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write x_s and x_k vectors of test rows as TSV.
    ExportRepr {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of test rows to export.
        #[arg(long, default_value_t = 1000)]
        rows: usize,
    },
    /// Precompute frozen features of the training rows for prompt tuning.
    CacheBuild {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_scheme(s: &str) -> Result<FinetuneScheme, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| {
        format!("unknown scheme `{s}` (shared_bottom_star, mmoe_star, ple_star, full_freeze)")
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Ingest(run) => run::ingest(&run),
        Command::Synth(run) => run::synth(&run),
        Command::Pretrain { run, reference } => run::train(&run, reference.as_deref(), true),
        Command::TrainBaseline { run, reference } => run::train(&run, reference.as_deref(), false),
        Command::PromptTune {
            run,
            checkpoint,
            cache,
            reference,
            manifest,
        } => run::prompt_tune(
            &run,
            checkpoint.as_deref(),
            cache.as_deref(),
            reference.as_deref(),
            manifest.as_deref(),
        ),
        Command::FinetuneBaseline {
            run,
            checkpoint,
            scheme,
            reference,
            manifest,
        } => run::finetune(
            &run,
            checkpoint.as_deref(),
            scheme,
            reference.as_deref(),
            manifest.as_deref(),
        ),
        Command::Eval { run, checkpoint } => run::eval(&run, checkpoint.as_deref()),
        Command::Compare { a, b } => run::compare(&a, &b),
        Command::SignTable {
            pretrain,
            joints,
            json,
        } => run::sign_table(&pretrain, &joints, json.as_deref()),
        Command::ExportRepr {
            run,
            checkpoint,
            rows,
        } => run::export_repr(&run, checkpoint.as_deref(), rows),
        Command::CacheBuild { run, checkpoint } => run::cache_build(&run, checkpoint.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
