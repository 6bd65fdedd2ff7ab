mod artifact;
mod commands;
mod config;
mod error;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use commands::{AblationFlags, Context};
use config::RunConfig;
use error::{CliError, CliResult};

/// Quality-guided mixture of score-fusion experts.
#[derive(Parser, Debug)]
#[command(name = "qme", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; defaults are used for omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for artifacts, reports and the run log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    Generate(Common),
    /// Train the quality estimator of the gating modality.
    TrainQe(Common),
    /// Train the fusion model and fit baseline statistics.
    TrainFusion {
        #[command(flatten)]
        common: Common,
        /// Comma-separated switches: no-score-loss, no-qe, z1.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate one method on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Modality id, min, max, mean, zscore, minmax, rhe, weighted_sum or qme.
        #[arg(long)]
        method: String,
    },
    /// Evaluate every method and emit the comparison table.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Also train and evaluate the ablation rows these switches reach.
        #[arg(long)]
        ablation: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::TrainQe(_) => "train-qe",
            Command::TrainFusion { .. } => "train-fusion",
            Command::Evaluate { .. } => "evaluate",
            Command::Compare { .. } => "compare",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Generate(c) | Command::TrainQe(c) => c,
            Command::TrainFusion { common, .. } | Command::Evaluate { common, .. } | Command::Compare { common, .. } => {
                common
            }
        }
    }
}

fn dispatch(ctx: &mut Context, command: &Command) -> CliResult<()> {
    match command {
        Command::Generate(_) => commands::generate_cmd(ctx),
        Command::TrainQe(_) => commands::train_qe_cmd(ctx),
        Command::TrainFusion { ablation, .. } => commands::train_fusion_cmd(ctx, AblationFlags::parse(ablation.as_deref())?),
        Command::Evaluate { method, .. } => commands::evaluate_cmd(ctx, method),
        Command::Compare { ablation, .. } => commands::compare_cmd(ctx, AblationFlags::parse(ablation.as_deref())?),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let common = cli.command.common();
    let cfg = RunConfig::load(common.config.as_deref(), common.seed)?;
    if let Some(dir) = &cfg.dataset_dir {
        if !matches!(cli.command, Command::Generate(_)) && !dir.exists() {
            return Err(CliError::Config(format!("dataset_dir {} does not exist", dir.display())));
        }
    }
    let mut ctx = Context::new(cfg, common.out.clone(), cli.command.name());
    ctx.log.event("start", json!({}));
    let result = dispatch(&mut ctx, &cli.command);
    match &result {
        Ok(()) => ctx.log.event("end", json!({ "status": "ok", "exit_code": 0 })),
        Err(e) => ctx.log.event(
            "end",
            json!({ "status": "error", "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() }),
        ),
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
