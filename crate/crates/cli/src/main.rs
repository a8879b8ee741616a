mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Train and sample W1+W2 proximal generative flows.
#[derive(Parser)]
#[command(name = "proxflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides one key, e.g. `--override lambda=0.1`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one potential and write a run directory.
    Train(ConfigArgs),
    /// Train all four regularization modes side by side.
    Sweep(ConfigArgs),
    /// Sample from a trained potential into CSV.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        n: usize,
        /// Euler steps; defaults to the number used in training.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Compare generated samples with the configured target.
    Evaluate {
        #[arg(long)]
        samples: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(c) => commands::cmd_train(&commands::load_config(&c.config, &c.overrides)?),
        Command::Sweep(c) => commands::cmd_sweep(&commands::load_config(&c.config, &c.overrides)?),
        Command::Generate { checkpoint, n, steps, seed, out } => commands::cmd_generate(&checkpoint, n, steps, seed, &out),
        Command::Evaluate { samples, config, seed, out } => {
            let cfg = commands::load_config(&config.config, &config.overrides)?;
            commands::cmd_evaluate(&samples, &cfg, seed, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
