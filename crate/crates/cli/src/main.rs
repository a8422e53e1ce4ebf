use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod ablate;
mod commands;

#[derive(Parser)]
#[command(name = "mmx", version, about = "Multimodal transformer pretraining and retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that reads a run configuration.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Named override bundle, applied after the file (repeatable).
    #[arg(long = "preset")]
    pub presets: Vec<String>,
    /// Dotted override such as `train.batch_size=16` (repeatable, applied last).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration.
    ShowConfig(ConfigArgs),
    /// Write the synthetic splits, vocabulary and class names.
    GenData(ConfigArgs),
    /// Pretrain from scratch or resume from a checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Score zero-shot retrieval on the held-out split when training ends.
        #[arg(long)]
        eval: bool,
    },
    /// Fine-tune a pretrained checkpoint (retrieval or VQA, per `finetune.task`).
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score every held-out caption against every held-out image.
    EvalRetrieval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Overlap metric and language-model perplexity of the configured corpora.
    DatasetMetrics(ConfigArgs),
    /// Finite-difference gradient check of the full model for each attention kind.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Attention kinds to check (default: all five).
        #[arg(long = "kind")]
        kinds: Vec<String>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Run every cell of a grid over shared seeds into one CSV.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Grid description (TOML).
        #[arg(long)]
        grid: PathBuf,
        /// Resolve and write every cell's config without training.
        #[arg(long)]
        dry_run: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::ShowConfig(c) => commands::show_config(&c),
        Command::GenData(c) => commands::gen_data(&c),
        Command::Pretrain { cfg, resume, eval } => commands::pretrain(&cfg, resume.as_deref(), eval),
        Command::Finetune { cfg, checkpoint } => commands::finetune(&cfg, &checkpoint),
        Command::EvalRetrieval { cfg, checkpoint } => commands::eval_retrieval(&cfg, &checkpoint),
        Command::DatasetMetrics(c) => commands::dataset_metrics(&c),
        Command::GradCheck { cfg, kinds, tol } => commands::grad_check(&cfg, &kinds, tol),
        Command::Ablate { cfg, grid, dry_run } => ablate::run(&cfg, &grid, dry_run),
    }
}

/// 2 for configuration problems, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| e.downcast_ref::<mmx_core::error::Error>().is_some_and(|e| e.is_config()));
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
