//! Shared plumbing for the subcommands: config resolution, output
//! directories, task construction, and checkpoint save/load of whole
//! models.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use talkdist::checkpoint::{self, TensorEntry};
use talkdist::comm::CommChannel;
use talkdist::config::{DataKind, ExperimentConfig, TaskSelect};
use talkdist::data::{gen_synthetic, ingest_movielens, make_tasks, SparseTask, TaskData};
use talkdist::engine::TensorSnapshot;
use talkdist::error::{Error, Result};
use talkdist::nets::{FeatureEncoder, PartitionedNet};
use talkdist::rng::Rng;
use talkdist::tensor::Tensor;

/// Create (or verify) the run output directory. An existing non-empty
/// directory requires --force.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} already has contents; pass --force to overwrite",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Resolve the MovieLens directory: either `data.dir` itself contains
/// u.data, or it is the dataset root holding ml-100k/.
pub fn movielens_dir(cfg: &ExperimentConfig) -> PathBuf {
    if cfg.data_dir.join("u.data").exists() {
        cfg.data_dir.clone()
    } else {
        cfg.data_dir.join("ml-100k")
    }
}

/// Build the task selected by the config, plus the list of downstream task
/// names (density-ranked) for reporting.
pub fn build_task(cfg: &ExperimentConfig, select: &TaskSelect) -> Result<(TaskData, Vec<String>)> {
    match cfg.data_kind {
        DataKind::Synthetic => {
            let (pretrain, downstream) = gen_synthetic(&cfg.synthetic)?;
            let task = match select {
                TaskSelect::Pretrain => TaskData::Dense(pretrain),
                TaskSelect::Downstream => TaskData::Dense(downstream),
                other => {
                    return Err(Error::Config(format!(
                        "task {:?} is not available on synthetic data",
                        other.to_value()
                    )))
                }
            };
            Ok((task, vec!["downstream".into()]))
        }
        DataKind::MovieLens => {
            let dir = movielens_dir(cfg);
            let corpus = ingest_movielens(&dir)?;
            for w in &corpus.warnings {
                eprintln!("warning: {w}");
            }
            let (pretrain, downstream, vocab) = make_tasks(&corpus, cfg.min_eval, cfg.max_genres)?;
            let names: Vec<String> = downstream.iter().map(|t| t.name.clone()).collect();
            let corpus = Arc::new(corpus);
            let vocab = Arc::new(vocab);
            let spec = match select {
                TaskSelect::Pretrain => pretrain,
                TaskSelect::Genre(g) => {
                    let want = format!("genre-{g}");
                    downstream
                        .into_iter()
                        .find(|t| t.name == want)
                        .ok_or_else(|| {
                            Error::Config(format!(
                                "genre task '{want}' is not a qualifying downstream task (have: {})",
                                names.join(", ")
                            ))
                        })?
                }
                TaskSelect::Rank(r) => {
                    if *r > downstream.len() {
                        return Err(Error::Config(format!(
                            "rank {r} out of range: {} downstream tasks",
                            downstream.len()
                        )));
                    }
                    downstream.into_iter().nth(r - 1).unwrap()
                }
                TaskSelect::Downstream => {
                    return Err(Error::Config(
                        "data.task=downstream applies to synthetic data".into(),
                    ))
                }
            };
            Ok((TaskData::Sparse(SparseTask { corpus, vocab, spec }), names))
        }
    }
}

/// Save a snapshot under new name prefixes (snapshots come out of training
/// with the student prefix; the pretrain command stores them as a teacher).
pub fn save_snapshot_with_prefix(
    path: &Path,
    snapshot: &TensorSnapshot,
    from: &str,
    to: &str,
) -> Result<()> {
    let entries: Vec<TensorEntry> = snapshot
        .iter()
        .map(|(name, shape, data)| TensorEntry {
            name: match name.strip_prefix(from) {
                Some(rest) => format!("{to}{rest}"),
                None => name.clone(),
            },
            shape: shape.clone(),
            data: data.clone(),
        })
        .collect();
    checkpoint::save(path, &entries)
}

fn restore_named(entries: &[TensorEntry], names: Vec<String>, tensors: Vec<&mut Tensor>) -> Result<()> {
    for (name, tensor) in names.into_iter().zip(tensors) {
        let entry = checkpoint::take(entries, &name, &tensor.shape)?;
        tensor.load_data(&entry.data)?;
    }
    Ok(())
}

/// Load a frozen teacher from a checkpoint, validating shapes against the
/// architecture the config declares.
pub fn load_teacher(
    cfg: &ExperimentConfig,
    task: &TaskData,
    path: &Path,
) -> Result<PartitionedNet> {
    let entries = checkpoint::load(path)?;
    let net_cfg = cfg.teacher_net_config(task.input_width())?;
    let mut init = Rng::new(0);
    let features = task.feature_dims().map(|d| FeatureEncoder::new(d, &mut init));
    let mut net = PartitionedNet::new(&net_cfg, features, &mut init)?;
    let names: Vec<String> = net.named_params("teacher").into_iter().map(|(n, _)| n).collect();
    restore_named(&entries, names, net.params_mut())?;
    net.set_frozen(true);
    Ok(net)
}

/// Load a distilled student plus its channels from a checkpoint.
pub fn load_student_with_channels(
    cfg: &ExperimentConfig,
    task: &TaskData,
    teacher: &PartitionedNet,
    path: &Path,
) -> Result<(PartitionedNet, CommChannel, CommChannel)> {
    let entries = checkpoint::load(path)?;
    let net_cfg = cfg.student_net_config(task.input_width())?;
    let mut init = Rng::new(0);
    let features = task.feature_dims().map(|d| FeatureEncoder::new(d, &mut init));
    let mut student = PartitionedNet::new(&net_cfg, features, &mut init)?;
    let names: Vec<String> =
        student.named_params("student").into_iter().map(|(n, _)| n).collect();
    restore_named(&entries, names, student.params_mut())?;

    let setup = talkdist::engine::ExperimentSetup {
        student_cfg: net_cfg,
        channel_hidden: cfg.channel_hidden,
        message_dim: cfg.message_dim,
        channel_dropout: cfg.channel_dropout,
    };
    let (mut student_channel, mut teacher_channel) = talkdist::engine::build_channels(
        cfg.method,
        &setup,
        &student,
        Some(teacher),
        &mut init,
    )?;
    let sc_names: Vec<String> =
        student_channel.named_params("E_g", "D_g").into_iter().map(|(n, _)| n).collect();
    restore_named(&entries, sc_names, student_channel.params_mut()).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!(
            "{msg}; the checkpoint has no student channel tensors (was it trained with a channel-free method such as scratch?)"
        )),
        other => other,
    })?;
    let tc_names: Vec<String> =
        teacher_channel.named_params("E_h", "D_h").into_iter().map(|(n, _)| n).collect();
    restore_named(&entries, tc_names, teacher_channel.params_mut()).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!(
            "{msg}; the checkpoint has no teacher channel tensors"
        )),
        other => other,
    })?;
    Ok((student, student_channel, teacher_channel))
}

/// One line per run in result.csv.
pub fn write_result(
    path: &Path,
    method: &str,
    task: &str,
    seed: u64,
    k: usize,
    final_rmse: f64,
    best_rmse: f64,
    best_step: usize,
) -> Result<()> {
    let text = format!(
        "method,task,seed,k,final_rmse,best_rmse,best_step\n{method},{task},{seed},{k},{final_rmse},{best_rmse},{best_step}\n"
    );
    std::fs::write(path, text)?;
    Ok(())
}
