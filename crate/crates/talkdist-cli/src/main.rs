//! `td` — experiment runner for interactive teacher-student distillation.
//!
//! Subcommands: pretrain, distill, sweep, analyze, gen-data. Configuration
//! comes from a flat `key = value` file plus `--set key=value` overrides;
//! the fully-resolved configuration is persisted next to each run's
//! outputs. Exit codes: 0 success, 2 config error, 3 data error,
//! 4 numerical failure, 5 shape/contract violation.

mod analyze;
mod common;
mod gen_data;
mod run;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use talkdist::config::{self, ConfigMap};
use talkdist::error::{Error, Result};

#[derive(Parser)]
#[command(name = "td", about = "Interactive teacher-student distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set td.k=2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Run seed (shorthand for --set seed=N).
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (shorthand for --set out=DIR).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on the pretrain task and write its checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a student with the configured method against a teacher.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Teacher checkpoint (required for every method except scratch).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Run a grid of configurations and aggregate the results.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shared teacher checkpoint (otherwise one is pretrained per seed).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Parallel runs (default from sweep.jobs).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compute per-bucket CKA grids between teacher and student.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Probe examples per class bucket.
        #[arg(long, default_value_t = 20)]
        per_class: usize,
    },
    /// Write materialized task splits as tab-separated text files.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn overrides_from(args: &ConfigArgs) -> Result<ConfigMap> {
    let mut map = ConfigMap::default();
    for set in &args.sets {
        let Some((key, value)) = set.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got '{set}'")));
        };
        map.set(key.trim(), value.trim());
    }
    if let Some(seed) = args.seed {
        map.set("seed", &seed.to_string());
    }
    if let Some(out) = &args.out {
        map.set("out", out.to_str().unwrap());
    }
    Ok(map)
}

fn load_file(args: &ConfigArgs) -> Result<Option<ConfigMap>> {
    match &args.config {
        Some(path) => Ok(Some(ConfigMap::load(path)?)),
        None => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { cfg } => {
            let file = load_file(&cfg)?;
            let overrides = overrides_from(&cfg)?;
            let resolved = config::resolve(file.as_ref(), &overrides)?;
            run::cmd_pretrain(&resolved, cfg.force)?;
        }
        Command::Distill { cfg, teacher } => {
            let file = load_file(&cfg)?;
            let overrides = overrides_from(&cfg)?;
            let resolved = config::resolve(file.as_ref(), &overrides)?;
            run::cmd_distill(&resolved, teacher.as_deref(), cfg.force)?;
        }
        Command::Sweep { cfg, teacher, jobs } => {
            let file = load_file(&cfg)?;
            let overrides = overrides_from(&cfg)?;
            sweep::cmd_sweep(&sweep::SweepArgs {
                file: file.as_ref(),
                overrides: &overrides,
                teacher: teacher.as_deref(),
                jobs,
                force: cfg.force,
            })?;
        }
        Command::Analyze { cfg, teacher, student, per_class } => {
            let file = load_file(&cfg)?;
            let overrides = overrides_from(&cfg)?;
            let resolved = config::resolve(file.as_ref(), &overrides)?;
            analyze::cmd_analyze(&resolved, &teacher, &student, per_class, cfg.force)?;
        }
        Command::GenData { cfg } => {
            let file = load_file(&cfg)?;
            let overrides = overrides_from(&cfg)?;
            let resolved = config::resolve(file.as_ref(), &overrides)?;
            gen_data::cmd_gen_data(&resolved, cfg.force)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
