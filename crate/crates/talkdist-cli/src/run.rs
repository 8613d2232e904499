//! The pretrain and distill subcommands: single training runs.

use std::path::{Path, PathBuf};

use talkdist::config::{ExperimentConfig, TaskSelect};
use talkdist::engine::{self, Method};
use talkdist::error::{Error, Result};
use talkdist::metrics;

use crate::common;

pub struct RunPaths {
    pub dir: PathBuf,
    pub resolved: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub result: PathBuf,
}

pub fn run_paths(out: &Path, checkpoint_name: &str) -> RunPaths {
    RunPaths {
        dir: out.to_path_buf(),
        resolved: out.join("resolved.config"),
        metrics: out.join("metrics.csv"),
        checkpoint: out.join(checkpoint_name),
        result: out.join("result.csv"),
    }
}

/// Train the teacher architecture from scratch on the pretrain task and
/// store it as a teacher checkpoint.
pub fn cmd_pretrain(cfg: &ExperimentConfig, force: bool) -> Result<f64> {
    let paths = run_paths(&cfg.out, "teacher.tdck");
    common::prepare_out_dir(&paths.dir, force)?;
    cfg.write_resolved(&paths.resolved)?;

    let (task, _) = common::build_task(cfg, &TaskSelect::Pretrain)?;
    let net_cfg = cfg.teacher_net_config(task.input_width())?;
    let setup = engine::ExperimentSetup {
        student_cfg: net_cfg,
        channel_hidden: cfg.channel_hidden,
        message_dim: cfg.message_dim,
        channel_dropout: cfg.channel_dropout,
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.method = Method::Scratch;
    let outcome = engine::train(None, &task, &setup, &train_cfg)?;

    metrics::write_rows(&paths.metrics, &outcome.history)?;
    common::save_snapshot_with_prefix(&paths.checkpoint, &outcome.best, "student", "teacher")?;
    common::write_result(
        &paths.result,
        "scratch",
        "pretrain",
        train_cfg.seed,
        0,
        outcome.final_rmse,
        outcome.best_rmse,
        outcome.best_step,
    )?;
    println!(
        "pretrain done: eval rmse {:.4} (best {:.4} @ step {}) -> {}",
        outcome.final_rmse,
        outcome.best_rmse,
        outcome.best_step,
        paths.checkpoint.display()
    );
    Ok(outcome.final_rmse)
}

/// Run the configured method against a frozen teacher checkpoint.
pub fn cmd_distill(cfg: &ExperimentConfig, teacher_ckpt: Option<&Path>, force: bool) -> Result<f64> {
    let paths = run_paths(&cfg.out, "student.tdck");
    common::prepare_out_dir(&paths.dir, force)?;
    cfg.write_resolved(&paths.resolved)?;

    let (task, _) = common::build_task(cfg, &cfg.task)?;
    let teacher = match teacher_ckpt {
        Some(p) => Some(common::load_teacher(cfg, &task, p)?),
        None => None,
    };
    if teacher.is_none() && cfg.method != Method::Scratch {
        return Err(Error::Config(format!(
            "method '{}' needs --teacher <checkpoint>",
            cfg.method.as_str()
        )));
    }
    let teacher_rmse = match &teacher {
        Some(t) => Some(engine::evaluate_rmse(t, &task, cfg.train.batch_size.max(256))?),
        None => None,
    };

    let setup = engine::ExperimentSetup {
        student_cfg: cfg.student_net_config(task.input_width())?,
        channel_hidden: cfg.channel_hidden,
        message_dim: cfg.message_dim,
        channel_dropout: cfg.channel_dropout,
    };
    let outcome = engine::train(teacher.as_ref(), &task, &setup, &cfg.train)?;

    let mut history = outcome.history.clone();
    if let Some(rmse) = teacher_rmse {
        history.insert(
            0,
            metrics::MetricRow::metric(0, 0, "eval", cfg.method.as_str(), cfg.train.iterations, "teacher_rmse", rmse),
        );
        println!("teacher zero-shot eval rmse {rmse:.4}");
    }
    metrics::write_rows(&paths.metrics, &history)?;
    common::save_snapshot_with_prefix(&paths.checkpoint, &outcome.best, "student", "student")?;
    common::write_result(
        &paths.result,
        cfg.method.as_str(),
        &cfg.task.to_value(),
        cfg.train.seed,
        cfg.train.iterations,
        outcome.final_rmse,
        outcome.best_rmse,
        outcome.best_step,
    )?;
    println!(
        "distill [{}] done: eval rmse {:.4} (best {:.4} @ step {}) -> {}",
        cfg.method.as_str(),
        outcome.final_rmse,
        outcome.best_rmse,
        outcome.best_step,
        paths.checkpoint.display()
    );
    Ok(outcome.final_rmse)
}
