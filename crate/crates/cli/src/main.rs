use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tapslf_cli::{overlay, Ablation, RunConfig};

#[derive(Parser)]
#[command(name = "tapslf", version, about = "Prompted, selectively adapted transformer for four ultrasound-style tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone with masked-patch reconstruction.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fine-tune prompts, LoRA factors and heads on a frozen backbone.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Disable task-aware prompts.
        #[arg(long)]
        no_tap: bool,
        /// Inject LoRA into every layer instead of the top ones.
        #[arg(long, conflicts_with = "frozen_ratio")]
        no_slf: bool,
        /// Fraction of encoder layers, from the bottom, left without LoRA.
        #[arg(long)]
        frozen_ratio: Option<f64>,
    },
    /// Evaluate a fine-tuned checkpoint on the test splits.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "all")]
        task: String,
        /// Fold LoRA updates into the base weights before evaluating.
        #[arg(long)]
        merge: bool,
    },
    /// Fine-tune once per frozen ratio and tabulate the results.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, default_value = "0.5,0.6,0.7,0.8")]
        ratios: String,
        #[arg(long)]
        parallel: bool,
    },
    /// Tint a predicted segmentation over its input image.
    Overlay {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint header and its parameter accounting.
    Inspect { checkpoint: PathBuf },
    /// Write the synthetic dataset as PGM images with a manifest.
    Export {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { config } => {
            tapslf_cli::cmd_pretrain(&RunConfig::load(config.as_deref())?)?;
        }
        Command::Finetune {
            config,
            backbone,
            no_tap,
            no_slf,
            frozen_ratio,
        } => {
            let ablation = Ablation {
                no_tap,
                no_slf,
                frozen_ratio,
            };
            tapslf_cli::cmd_finetune(&RunConfig::load(config.as_deref())?, backbone.as_deref(), &ablation)?;
        }
        Command::Eval { checkpoint, task, merge } => {
            tapslf_cli::cmd_eval(&checkpoint, &tapslf_cli::parse_tasks(&task)?, merge)?;
        }
        Command::Sweep {
            config,
            backbone,
            ratios,
            parallel,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            tapslf_cli::cmd_sweep(&cfg, backbone.as_deref(), &tapslf_cli::parse_ratios(&ratios)?, parallel)?;
        }
        Command::Overlay { checkpoint, seed, out } => overlay::cmd_overlay(&checkpoint, seed, &out)?,
        Command::Inspect { checkpoint } => {
            tapslf_cli::cmd_inspect(&checkpoint)?;
        }
        Command::Export { config, out } => tapslf_cli::cmd_export(&RunConfig::load(config.as_deref())?, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(tapslf_cli::exit_code(&e))
        }
    }
}
