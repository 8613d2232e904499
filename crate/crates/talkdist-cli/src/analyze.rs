//! Representation-similarity analysis over a trained teacher/student pair:
//! one CKA matrix file per class bucket plus an alignment summary CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use talkdist::analysis::{probe_and_grid, SimilarityGrid};
use talkdist::config::ExperimentConfig;
use talkdist::error::Result;

use crate::common;

fn grid_to_tsv(grid: &SimilarityGrid) -> String {
    let mut out = String::from("cka");
    for label in &grid.labels {
        let _ = write!(out, "\t{label}");
    }
    out.push('\n');
    let k = grid.labels.len();
    for (r, label) in grid.labels.iter().enumerate() {
        let _ = write!(out, "{label}");
        for c in 0..k {
            let _ = write!(out, "\t{:.6}", grid.values[r * k + c]);
        }
        out.push('\n');
    }
    out
}

/// Matched cross-model pairs reported in the summary: lower states, higher
/// states, and the message space against both teacher levels.
const SUMMARY_PAIRS: [(&str, &str); 4] =
    [("s_g", "s_h"), ("e_g", "e_h"), ("m_g", "s_h"), ("m_g", "e_h")];

pub fn cmd_analyze(
    cfg: &ExperimentConfig,
    teacher_ckpt: &Path,
    student_ckpt: &Path,
    per_class: usize,
    force: bool,
) -> Result<PathBuf> {
    common::prepare_out_dir(&cfg.out, force)?;
    cfg.write_resolved(&cfg.out.join("resolved.config"))?;

    let (task, _) = common::build_task(cfg, &cfg.task)?;
    let teacher = common::load_teacher(cfg, &task, teacher_ckpt)?;
    let (student, student_channel, _teacher_channel) =
        common::load_student_with_channels(cfg, &task, &teacher, student_ckpt)?;

    let (grids, warnings) =
        probe_and_grid(&teacher, &student, &student_channel, &task, per_class)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let mut summary = String::from("bucket,pair,cka\n");
    for grid in &grids {
        let path = cfg.out.join(format!("cka_bucket_{}.tsv", grid.bucket));
        std::fs::write(&path, grid_to_tsv(grid))?;
        for (a, b) in SUMMARY_PAIRS {
            if let Some(v) = grid.get(a, b) {
                summary.push_str(&format!("{},{a}:{b},{v:.6}\n", grid.bucket));
            }
        }
    }
    let summary_path = cfg.out.join("cka_summary.csv");
    std::fs::write(&summary_path, summary)?;
    println!(
        "analyze done: {} bucket grids -> {}",
        grids.len(),
        cfg.out.display()
    );
    Ok(summary_path)
}
