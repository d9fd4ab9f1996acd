use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use l2kd_cli::{cmd_analyze, cmd_permute, cmd_run, CliError, Overrides, PermuteOptions};

/// Lifelong-learning streams with pseudo-replay and knowledge distillation.
#[derive(Parser)]
#[command(name = "l2kd", version)]
struct Cli {
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker processes for `permute`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured method once over the configured stream.
    Run { config: PathBuf },
    /// Run every configured method over every task order and summarize.
    Permute { config: PathBuf },
    /// Write learning curves and teacher-split tables for a finished run.
    Analyze { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let overrides = Overrides { seed: cli.seed, out: cli.out };
    let result: Result<(), CliError> = match &cli.command {
        Cmd::Run { config } => cmd_run(config, &overrides).map(drop),
        Cmd::Permute { config } => {
            let worker = std::env::current_exe().ok();
            cmd_permute(config, &PermuteOptions { overrides, jobs: cli.jobs, worker }).map(drop)
        }
        Cmd::Analyze { dir } => cmd_analyze(dir).map(drop),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
