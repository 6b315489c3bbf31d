//! `shakti-forge`: train, evaluate and inspect the synthetic
//! vision-language models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 checkpoint error, 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shakti_core::error::TrainError;
use shakti_core::{Error, Result};

use config::{load_config, resolve, CliOverrides, Fallback, ResolvedConfig};

#[derive(Parser)]
#[command(
    name = "shakti-forge",
    version,
    about = "Training harness for a small vision-language model family"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Model preset: 1b, 4b or toy.
    #[arg(long)]
    model: Option<String>,
    /// Training stage (1, 2 or 3).
    #[arg(long)]
    stage: Option<u8>,
    /// Root random seed for init, data and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for checkpoints, metrics and reports.
    #[arg(long, value_name = "PATH")]
    outdir: Option<PathBuf>,
    /// Use the published table's stage-1 learning rate for the 4b preset
    /// (2e-5) instead of the prose value (2e-4).
    #[arg(long)]
    table2_lr: bool,
}

impl CommonArgs {
    fn overrides(&self) -> CliOverrides {
        CliOverrides {
            model: self.model.clone(),
            stage: self.stage,
            seed: self.seed,
            outdir: self.outdir.clone(),
            table2_lr: self.table2_lr,
        }
    }

    fn resolve(&self, fallback: Fallback) -> Result<ResolvedConfig> {
        resolve(
            load_config(self.config.as_deref())?,
            self.overrides(),
            fallback,
        )
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one stage; later stages load the previous stage's checkpoint.
    Train(CommonArgs),
    /// Evaluate a checkpoint: perplexity (stage 1) or exact match (2-3).
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck,
    /// Print checkpoint metadata and tensor inventory.
    Inspect(InspectArgs),
    /// Render glyph samples as PPM files with a caption manifest.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to inspect.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of samples to render.
    #[arg(long, default_value_t = 16)]
    count: usize,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Data(_) | Error::Image(_) => 2,
        Error::Train(t) => match t {
            TrainError::NonFiniteLoss { .. } => 3,
            _ => 2,
        },
        Error::Checkpoint(_) => 4,
        Error::Tensor(_) => 3,
        Error::Io(_) => 1,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train(common) => {
            let resolved = common.resolve(Fallback::default())?;
            commands::train(&resolved)?;
        }
        Cmd::Eval(args) => {
            // The stage argument is optional here; the checkpoint carries it.
            let resolved = args.common.resolve(Fallback {
                model: None,
                stage: Some(1),
            })?;
            commands::eval(&resolved, &args.checkpoint, args.common.stage)?;
        }
        Cmd::Gradcheck => {
            if !commands::gradcheck()? {
                return Ok(ExitCode::from(3));
            }
        }
        Cmd::Inspect(args) => {
            commands::inspect(&args.checkpoint)?;
        }
        Cmd::GenData(args) => {
            let resolved = args.common.resolve(Fallback {
                model: Some("toy"),
                stage: Some(2),
            })?;
            commands::gen_data(&resolved, args.count)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
