use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use mnaft::maskedft::FinetuneMode;
use mnaft::pipeline::{self, Layout, RunConfig};
use mnaft::Result;

#[derive(Parser)]
#[command(name = "mnaft", version, about = "Neuron-aware selective fine-tuning experiments on synthetic image translation")]
struct Cli {
    /// TOML run configuration; defaults are used for anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding all stage artifacts.
    #[arg(long, global = true, default_value = "mnaft-run")]
    out: PathBuf,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, score and eval splits of every task.
    GenData,
    /// Train the base model on all tasks.
    TrainBase,
    /// Score every feed-forward unit and select layers.
    Score {
        /// Also compare scores with exact ablation on the most relevant language block.
        #[arg(long)]
        with_oracle: bool,
    },
    /// Split units of the selected layers into general and task-specific groups.
    Partition,
    /// Fine-tune the base model under a gradient-mask mode.
    Finetune {
        #[arg(long, default_value = "mnaft")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        task: usize,
    },
    /// Evaluate the base model and every fine-tuned model on all tasks.
    Eval,
    /// Write activation profiles, neuron projections and the forgetting table.
    Report,
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = Layout::new(cli.out);
    match cli.command {
        Command::GenData => pipeline::cmd_gen_data(&cfg, &out),
        Command::TrainBase => pipeline::cmd_train_base(&cfg, &out),
        Command::Score { with_oracle } => pipeline::cmd_score(&cfg, &out, with_oracle),
        Command::Partition => pipeline::cmd_partition(&cfg, &out),
        Command::Finetune { mode, task } => pipeline::cmd_finetune(&cfg, &out, FinetuneMode::parse(&mode)?, task),
        Command::Eval => pipeline::cmd_eval(&cfg, &out),
        Command::Report => pipeline::cmd_report(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).target(env_logger::Target::Stderr).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
