//! Shared fixtures for the acceptance suite, including the trained-model
//! suites for the trend criteria (computed once, reused across tests).

use std::sync::{Mutex, OnceLock};

use talkdist::data::{DenseDataset, SyntheticSpec, TaskData};
use talkdist::engine::{self, ExperimentSetup, Method, TrainConfig};
use talkdist::losses::LossWeights;
use talkdist::nets::{NetConfig, PartitionedNet, SPARSE_INPUT_WIDTH};
use talkdist::rng::Rng;

/// Small realizable regression task for the fast criteria.
pub fn tiny_dense_task() -> TaskData {
    let mut rng = Rng::new(404);
    let gen = |n: usize, rng: &mut Rng| {
        let mut xs = Vec::with_capacity(n * 3);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f32> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let y = 0.6 * x[0] - 0.3 * x[1] + 0.2 * x[2] * x[2] + 0.05 * rng.normal();
            xs.extend(x);
            ys.push(y);
        }
        (xs, ys)
    };
    let (train_x, train_y) = gen(256, &mut rng);
    let (eval_x, eval_y) = gen(128, &mut rng);
    TaskData::Dense(DenseDataset {
        input_width: 3,
        train_x,
        train_y,
        eval_x,
        eval_y,
        eval_buckets: None,
    })
}

pub fn tiny_setup() -> ExperimentSetup {
    ExperimentSetup {
        student_cfg: NetConfig::two_layer(3, 6, 4, 1, 0.0),
        channel_hidden: 6,
        message_dim: 4,
        channel_dropout: 0.0,
    }
}

/// A frozen teacher trained on the tiny task.
pub fn tiny_teacher(task: &TaskData) -> PartitionedNet {
    let setup = ExperimentSetup {
        student_cfg: NetConfig::two_layer(3, 10, 6, 1, 0.0),
        ..tiny_setup()
    };
    let cfg = TrainConfig {
        method: Method::Scratch,
        iterations: 0,
        weights: LossWeights::default(),
        noise_sigma: None,
        ramp_up: None,
        train_steps: 400,
        batch_size: 16,
        lr: 3e-3,
        seed: 40,
        eval_every: 100,
    };
    let mut out = engine::train(None, task, &setup, &cfg).unwrap();
    out.student.set_frozen(true);
    out.student
}

// ── Synthetic distribution-shift suite (criteria 5 and 6) ───────────────
//
// One teacher is pre-trained on the subpopulation mixture at a fixed seed
// and frozen; each method then trains students over the five seeds. Method
// hyperparameters were tuned offline and are pinned here. The compared
// metric is the RMSE of the delivered checkpoint (best eval during the
// run, the standard early-stopping protocol).

pub const TREND_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn trend_spec() -> SyntheticSpec {
    SyntheticSpec {
        input_dim: 16,
        subpops: 5,
        mixture: vec![0.30, 0.25, 0.20, 0.15, 0.10],
        downstream_subpop: 4,
        noise_std: 0.1,
        pretrain_train: 8000,
        pretrain_eval: 2000,
        downstream_train: 32,
        downstream_eval: 1000,
        seed: 1,
        mean_scale: 2.0,
        weight_shift: 0.5,
        downstream_shift: 0.3,
    }
}

fn trend_student_setup() -> ExperimentSetup {
    ExperimentSetup {
        student_cfg: NetConfig::two_layer(16, 16, 8, 1, 0.05),
        channel_hidden: 32,
        message_dim: 16,
        channel_dropout: 0.1,
    }
}

fn trend_train_cfg(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        iterations: 2,
        weights: LossWeights::default(),
        noise_sigma: None,
        ramp_up: None,
        train_steps: 12_000,
        batch_size: 16,
        lr: 0.02,
        seed,
        eval_every: 2_000,
    }
}

/// Pinned tuned weights per arm (offline grid search, 5 seeds).
pub fn trend_weights(arm: &str) -> LossWeights {
    match arm {
        "scratch" => LossWeights::default(),
        "hybrid" => LossWeights {
            hybrid_logit: 0.3,
            hybrid_feature: 3.0,
            ..LossWeights::default()
        },
        "td" => LossWeights { interact: 0.01, mc: 3.0, sc: 0.02, ..LossWeights::default() },
        "td_noint" => LossWeights { interact: 0.0, mc: 3.0, sc: 0.02, ..LossWeights::default() },
        other => panic!("unknown arm {other}"),
    }
}

pub struct TrendArm {
    pub name: &'static str,
    /// Delivered-checkpoint RMSE per seed, in TREND_SEEDS order.
    pub rmse: Vec<f64>,
}

impl TrendArm {
    pub fn mean(&self) -> f64 {
        self.rmse.iter().sum::<f64>() / self.rmse.len() as f64
    }
}

pub struct SyntheticSuite {
    pub teacher_rmse: f64,
    pub arms: Vec<TrendArm>,
}

impl SyntheticSuite {
    pub fn arm(&self, name: &str) -> &TrendArm {
        self.arms.iter().find(|a| a.name == name).unwrap()
    }
}

/// Run a list of (label, config) training jobs over two worker threads and
/// return delivered-checkpoint RMSEs keyed by label.
fn run_jobs(
    teacher: &PartitionedNet,
    task: &TaskData,
    setup: &ExperimentSetup,
    jobs: Vec<(String, TrainConfig)>,
) -> Vec<(String, f64)> {
    let queue = Mutex::new(jobs);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..2 {
            scope.spawn(|| loop {
                let item = queue.lock().unwrap().pop();
                let Some((label, cfg)) = item else { break };
                let teacher_ref =
                    if cfg.method == Method::Scratch { None } else { Some(teacher) };
                let out = engine::train(teacher_ref, task, setup, &cfg)
                    .unwrap_or_else(|e| panic!("{label}: {e}"));
                results.lock().unwrap().push((label, out.best_rmse));
            });
        }
    });
    results.into_inner().unwrap()
}

static SYNTHETIC_SUITE: OnceLock<SyntheticSuite> = OnceLock::new();

pub fn synthetic_suite() -> &'static SyntheticSuite {
    SYNTHETIC_SUITE.get_or_init(|| {
        let spec = trend_spec();
        let (pretrain, downstream) = talkdist::data::gen_synthetic(&spec).unwrap();
        let pretrain = TaskData::Dense(pretrain);
        let downstream = TaskData::Dense(downstream);

        // Fixed-seed teacher on the mixture, early-stopped.
        let teacher_setup = ExperimentSetup {
            student_cfg: NetConfig::two_layer(16, 64, 32, 1, 0.05),
            ..trend_student_setup()
        };
        let teacher_cfg = TrainConfig {
            train_steps: 20_000,
            lr: 0.003,
            batch_size: 32,
            eval_every: 2_000,
            ..trend_train_cfg(Method::Scratch, 0)
        };
        let mut t_out = engine::train(None, &pretrain, &teacher_setup, &teacher_cfg).unwrap();
        // Restore the best checkpoint into the teacher before freezing.
        let best: std::collections::HashMap<String, Vec<f32>> = t_out
            .best
            .iter()
            .map(|(n, _, d)| (n.clone(), d.clone()))
            .collect();
        for (name, tensor) in t_out
            .student
            .named_params("student")
            .into_iter()
            .map(|(n, _)| n)
            .collect::<Vec<_>>()
            .into_iter()
            .zip(t_out.student.params_mut())
        {
            tensor.load_data(&best[&name]).unwrap();
        }
        t_out.student.set_frozen(true);
        let teacher = t_out.student;
        let teacher_rmse = engine::evaluate_rmse(&teacher, &downstream, 512).unwrap();

        let setup = trend_student_setup();
        let arms = ["scratch", "hybrid", "td", "td_noint"];
        let mut jobs = Vec::new();
        for arm in arms {
            for &seed in &TREND_SEEDS {
                let method = match arm {
                    "scratch" => Method::Scratch,
                    "hybrid" => Method::Hybrid,
                    _ => Method::Td,
                };
                let mut cfg = trend_train_cfg(method, seed);
                cfg.weights = trend_weights(arm);
                jobs.push((format!("{arm}:{seed}"), cfg));
            }
        }
        let results = run_jobs(&teacher, &downstream, &setup, jobs);
        let collect = |name: &'static str| -> TrendArm {
            let mut rmse = Vec::new();
            for &seed in &TREND_SEEDS {
                let label = format!("{name}:{seed}");
                let v = results.iter().find(|(l, _)| *l == label).unwrap().1;
                rmse.push(v);
            }
            TrendArm { name, rmse }
        };
        SyntheticSuite {
            teacher_rmse,
            arms: arms.iter().map(|a| collect(a)).collect(),
        }
    })
}

// ── MovieLens-100K suite (criterion 7) ───────────────────────────────────

pub fn movielens_dir() -> std::path::PathBuf {
    let root = std::env::var("TD_DATA_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|_| {
            std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
        });
    root.join("ml-100k")
}

pub struct MlSuite {
    pub teacher_pretrain_rmse: f64,
    /// (genre name, scratch delivered RMSE at seed 1), densest first.
    pub scratch_band: Vec<(String, f64)>,
    /// (genre, seed, scratch RMSE, td RMSE) over the 4 sparsest genres.
    pub sparse_pairs: Vec<(String, u64, f64, f64)>,
}

fn ml_train_cfg(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        iterations: 2,
        weights: LossWeights::default(),
        noise_sigma: None,
        ramp_up: None,
        train_steps: ML_STUDENT_STEPS,
        batch_size: 64,
        lr: 1e-3,
        seed,
        eval_every: 500,
    }
}

pub const ML_STUDENT_STEPS: usize = 2000;
pub const ML_TEACHER_STEPS: usize = 4000;

/// Pinned tuned weights for the MovieLens interactive runs.
pub fn ml_td_weights() -> LossWeights {
    LossWeights { interact: 0.01, mc: 3.0, sc: 0.02, ..LossWeights::default() }
}

static ML_SUITE: OnceLock<MlSuite> = OnceLock::new();

pub fn ml_suite() -> &'static MlSuite {
    ML_SUITE.get_or_init(|| {
        use std::sync::Arc;
        use talkdist::data::{ingest_movielens, make_tasks, SparseTask};

        let corpus = ingest_movielens(&movielens_dir()).expect("dataset present");
        let (pretrain, downstream, vocab) = make_tasks(&corpus, 500, 8).unwrap();
        let corpus = Arc::new(corpus);
        let vocab = Arc::new(vocab);
        let task_of = |spec: talkdist::data::TaskSpec| -> TaskData {
            TaskData::Sparse(SparseTask { corpus: corpus.clone(), vocab: vocab.clone(), spec })
        };
        let genre_names: Vec<String> = downstream.iter().map(|t| t.name.clone()).collect();
        let tasks: Vec<TaskData> = downstream.into_iter().map(task_of).collect();
        let pretrain = task_of(pretrain);

        // Teacher: 512/256 on the all-genre pretrain task, fixed seed.
        let teacher_setup = ExperimentSetup {
            student_cfg: NetConfig::two_layer(SPARSE_INPUT_WIDTH, 512, 256, 1, 0.1),
            channel_hidden: 256,
            message_dim: 128,
            channel_dropout: 0.1,
        };
        let teacher_cfg = TrainConfig {
            train_steps: ML_TEACHER_STEPS,
            batch_size: 128,
            lr: 1e-3,
            eval_every: 500,
            ..ml_train_cfg(Method::Scratch, 0)
        };
        let mut t_out = engine::train(None, &pretrain, &teacher_setup, &teacher_cfg).unwrap();
        let best: std::collections::HashMap<String, Vec<f32>> =
            t_out.best.iter().map(|(n, _, d)| (n.clone(), d.clone())).collect();
        let names: Vec<String> =
            t_out.student.named_params("student").into_iter().map(|(n, _)| n).collect();
        for (name, tensor) in names.into_iter().zip(t_out.student.params_mut()) {
            tensor.load_data(&best[&name]).unwrap();
        }
        t_out.student.set_frozen(true);
        let teacher = t_out.student;
        let teacher_pretrain_rmse = t_out.best_rmse;

        let setup = ExperimentSetup {
            student_cfg: NetConfig::two_layer(SPARSE_INPUT_WIDTH, 128, 64, 1, 0.1),
            channel_hidden: 256,
            message_dim: 128,
            channel_dropout: 0.1,
        };

        // Scratch band: every qualifying genre at seed 1.
        let mut scratch_band = Vec::new();
        {
            let jobs: Vec<(String, TrainConfig)> = genre_names
                .iter()
                .map(|g| (g.clone(), ml_train_cfg(Method::Scratch, 1)))
                .collect();
            // Genres have different tasks; run them one label at a time.
            let queue = Mutex::new(jobs);
            let results = Mutex::new(Vec::new());
            std::thread::scope(|scope| {
                for _ in 0..2 {
                    scope.spawn(|| loop {
                        let item = queue.lock().unwrap().pop();
                        let Some((label, cfg)) = item else { break };
                        let idx = genre_names.iter().position(|g| *g == label).unwrap();
                        let out = engine::train(None, &tasks[idx], &setup, &cfg).unwrap();
                        results.lock().unwrap().push((label, out.best_rmse));
                    });
                }
            });
            let results = results.into_inner().unwrap();
            for g in &genre_names {
                let v = results.iter().find(|(l, _)| l == g).unwrap().1;
                scratch_band.push((g.clone(), v));
            }
        }

        // Sparse genres (density ranks 5..8): scratch and td over 5 seeds.
        let sparse_idx: Vec<usize> = (4..genre_names.len().min(8)).collect();
        let mut jobs: Vec<(String, TrainConfig)> = Vec::new();
        for &gi in &sparse_idx {
            for &seed in &TREND_SEEDS {
                jobs.push((format!("scratch:{gi}:{seed}"), ml_train_cfg(Method::Scratch, seed)));
                let mut td = ml_train_cfg(Method::Td, seed);
                td.weights = ml_td_weights();
                jobs.push((format!("td:{gi}:{seed}"), td));
            }
        }
        let queue = Mutex::new(jobs);
        let results = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..2 {
                scope.spawn(|| loop {
                    let item = queue.lock().unwrap().pop();
                    let Some((label, cfg)) = item else { break };
                    let gi: usize = label.split(':').nth(1).unwrap().parse().unwrap();
                    let teacher_ref =
                        if cfg.method == Method::Scratch { None } else { Some(&teacher) };
                    let out = engine::train(teacher_ref, &tasks[gi], &setup, &cfg)
                        .unwrap_or_else(|e| panic!("{label}: {e}"));
                    results.lock().unwrap().push((label, out.best_rmse));
                });
            }
        });
        let results = results.into_inner().unwrap();
        let get = |label: String| results.iter().find(|(l, _)| *l == label).unwrap().1;
        let mut sparse_pairs = Vec::new();
        for &gi in &sparse_idx {
            for &seed in &TREND_SEEDS {
                sparse_pairs.push((
                    genre_names[gi].clone(),
                    seed,
                    get(format!("scratch:{gi}:{seed}")),
                    get(format!("td:{gi}:{seed}")),
                ));
            }
        }
        MlSuite { teacher_pretrain_rmse, scratch_band, sparse_pairs }
    })
}
