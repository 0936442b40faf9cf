use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use umm_core::commands;
use umm_core::config::{Command, RunConfig};

/// Coding-rate-reduction overfitting monitor and UMM fine-tuner.
#[derive(Parser)]
#[command(name = "umm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Plain-text key=value config; applied before --seed/--out/--set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// key=value override, applied last; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved config and exit without running.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate a synthetic SCM dataset.
    GenData,
    /// SSL pretraining with ΔR/probe monitoring and periodic checkpoints.
    Pretrain,
    /// Re-evaluate every checkpoint of a pretraining run.
    Monitor,
    /// Bi-level fine-tuning of the late layers from a checkpoint.
    Umm,
    /// Probe, k-NN and CRR evaluation of one checkpoint, with timings.
    Eval,
    /// JSON report (series, peak detection, Pearson) from a run's curve CSV.
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenData => Command::GenData,
            Cmd::Pretrain => Command::Pretrain,
            Cmd::Monitor => Command::Monitor,
            Cmd::Umm => Command::Umm,
            Cmd::Eval => Command::Eval,
            Cmd::Report => Command::Report,
        }
    }
}

fn resolve(cli: &Cli) -> umm_core::Result<RunConfig> {
    let mut cfg = RunConfig::defaults(cli.command.into());
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.display().to_string())?;
    }
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = Command::from(cli.command);
    let result = resolve(&cli).and_then(|cfg| {
        if cli.dry_run {
            Ok(cfg.to_text())
        } else {
            commands::run(&cfg)
        }
    });
    match result {
        Ok(summary) => {
            println!("{}", summary.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("umm {command}: {e}");
            ExitCode::FAILURE
        }
    }
}
