mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use wit_core::trainer::Preset;

use config::{Overrides, CONFIG_KEYS};

#[derive(Parser, Debug)]
#[command(
    name = "wit",
    version,
    about = "Train and analyse small language models with separately weighted prompt and response tokens",
    after_help = CONFIG_KEYS
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Config file (TOML, or JSON with a .json extension)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Seed for model init, shuffling, alignment and synthetic data
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel sweep workers
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Prompt-token loss weight
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda_p: Option<f64>,
    /// Response-token loss weight
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda_r: Option<f64>,
    /// Epoch preset: lima (5), alpaca (2) or tulu (1)
    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "lima" => Ok(Preset::Lima),
        "alpaca" => Ok(Preset::Alpaca),
        "tulu" => Ok(Preset::Tulu),
        other => Err(format!("unknown preset `{other}` (expected lima, alpaca or tulu)")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch on a plain-text corpus with uniform token weights
    Pretrain,
    /// Weighted instruction tuning on prompt/response pairs
    Finetune {
        /// Checkpoint to start from instead of a fresh init
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Preference alignment on top of a fine-tuned checkpoint
    Dpo {
        /// Fine-tuned checkpoint; also the frozen reference model
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint: exact match, log-prob profile, prompt sensitivity
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every (lambda_p, lambda_r) cell of the grid
    Sweep,
    /// Heatmaps and optimal weights from a finished sweep
    Analyze {
        #[arg(long)]
        sweep: PathBuf,
    },
    /// Write synthetic train/eval/preference files and a text corpus
    GenData,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Invalid(e)) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(2)
        }
    }
}

// Library errors already embed their source in the message; skip causes that would repeat it.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if prev.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
        prev = msg;
    }
    out
}

impl Common {
    fn overrides(&self, init: Option<PathBuf>) -> Overrides {
        Overrides {
            out_dir: self.out_dir.clone(),
            seed: self.seed,
            jobs: self.jobs,
            lambda_p: self.lambda_p,
            lambda_r: self.lambda_r,
            preset: self.preset,
            init,
        }
    }
}
