//! Command-line runner: one TOML config per experiment, JSON and CSV
//! artifacts in the output directory.

pub mod commands;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

pub use commands::Output;
pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "teamlora", version, about = "LoRA, MoELoRA and TeamLoRA experiments on a frozen synthetic host")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print nothing but errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured adapter; writes metrics.csv and checkpoint.json.
    Train,
    /// Matmul counts and latency of every adapter kind; writes cost_report.json.
    Bench,
    /// Collaboration × competition grid over several seeds; writes ablation.json and ablation.txt.
    Ablate,
    /// Expert load and top-1 redundancy of a trained model; writes load_report.json and retention_report.json.
    Analyze {
        /// Analyze this checkpoint instead of training first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every adapter gradient; writes gradcheck.json.
    Gradcheck,
    /// Evaluate a checkpoint on the eval split; writes eval.json.
    Eval {
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

pub fn resolve_config(global: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &global.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn execute(cfg: &ExperimentConfig, command: &Command) -> Result<Output> {
    match command {
        Command::Train => commands::train(cfg),
        Command::Bench => commands::bench(cfg),
        Command::Ablate => commands::ablate(cfg),
        Command::Analyze { checkpoint } => commands::analyze(cfg, checkpoint.as_deref()),
        Command::Gradcheck => commands::gradcheck(cfg),
        Command::Eval { checkpoint } => {
            let path = checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint.json"));
            commands::eval(cfg, &path)
        }
    }
}

/// Write every artifact through a temporary sibling and a rename.
pub fn write_artifacts(dir: &Path, output: &Output) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    for (name, bytes) in &output.artifacts {
        let path = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

/// Run a parsed command line; returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = resolve_config(&cli.global).and_then(|cfg| {
        let output = execute(&cfg, &cli.command)?;
        write_artifacts(&cfg.out_dir, &output)?;
        Ok((cfg, output))
    });
    match result {
        Ok((cfg, output)) => {
            if !cli.global.quiet {
                for line in &output.summary {
                    println!("{line}");
                }
                for (name, _) in &output.artifacts {
                    println!("wrote {}", cfg.out_dir.join(name).display());
                }
            }
            if output.pass {
                0
            } else {
                for line in output.summary.iter().filter(|l| l.starts_with("check failed")) {
                    eprintln!("{line}");
                }
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
