//! Experiment configuration: a flat `key = value` file format with dotted
//! keys, built-in defaults, and strict unknown-key rejection.
//!
//! Precedence: command-line overrides > config file > defaults (the
//! `TD_DATA_DIR` environment variable seeds the default of `data.dir`).
//! Every run persists its fully-resolved configuration (defaults expanded,
//! keys sorted) next to its outputs, and a run is reproducible from that
//! file alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::SyntheticSpec;
use crate::engine::{Method, RampUp, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::{LayerPartition, NetConfig, SPARSE_INPUT_WIDTH};

/// Ordered key -> value map with typed accessors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    pairs: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<ConfigMap> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            pairs.insert(key, value.trim().to_string());
        }
        Ok(ConfigMap { pairs })
    }

    pub fn load(path: &Path) -> Result<ConfigMap> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        ConfigMap::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.pairs.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Overlay `other` on top of self.
    pub fn apply(&mut self, other: &ConfigMap) {
        for (k, v) in &other.pairs {
            self.pairs.insert(k.clone(), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing config key '{key}'")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.required(key)?
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}': expected an unsigned integer")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.required(key)?
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}': expected an unsigned integer")))
    }

    pub fn get_f32(&self, key: &str) -> Result<f32> {
        self.required(key)?
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}': expected a number")))
    }

    /// Empty value means "unset" for optional numeric keys.
    pub fn get_opt_f32(&self, key: &str) -> Result<Option<f32>> {
        match self.get(key) {
            None => Ok(None),
            Some("") => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("key '{key}': expected a number"))),
        }
    }

    pub fn get_list_usize(&self, key: &str) -> Result<Vec<usize>> {
        self.required(key)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("key '{key}': expected integers")))
            })
            .collect()
    }

    pub fn get_list_f32(&self, key: &str) -> Result<Vec<f32>> {
        self.required(key)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("key '{key}': expected numbers")))
            })
            .collect()
    }
}

/// Which dataset a run binds to.
#[derive(Debug, Clone, PartialEq)]
pub enum DataKind {
    MovieLens,
    Synthetic,
}

/// Task selection within the dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSelect {
    Pretrain,
    /// Downstream genre by name ("drama").
    Genre(String),
    /// Downstream genre by 1-based density rank (1 = densest).
    Rank(usize),
    /// The synthetic downstream subpopulation task.
    Downstream,
}

impl TaskSelect {
    pub fn parse(s: &str) -> Result<TaskSelect> {
        if s == "pretrain" {
            return Ok(TaskSelect::Pretrain);
        }
        if s == "downstream" {
            return Ok(TaskSelect::Downstream);
        }
        if let Some(name) = s.strip_prefix("genre:") {
            return Ok(TaskSelect::Genre(name.to_string()));
        }
        if let Some(rank) = s.strip_prefix("rank:") {
            let rank: usize = rank
                .parse()
                .map_err(|_| Error::Config(format!("bad task rank in '{s}'")))?;
            if rank == 0 {
                return Err(Error::Config("task rank is 1-based".into()));
            }
            return Ok(TaskSelect::Rank(rank));
        }
        Err(Error::Config(format!(
            "bad data.task '{s}' (expected pretrain|downstream|genre:<name>|rank:<n>)"
        )))
    }

    pub fn to_value(&self) -> String {
        match self {
            TaskSelect::Pretrain => "pretrain".into(),
            TaskSelect::Downstream => "downstream".into(),
            TaskSelect::Genre(g) => format!("genre:{g}"),
            TaskSelect::Rank(r) => format!("rank:{r}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub out: PathBuf,
    pub data_kind: DataKind,
    pub data_dir: PathBuf,
    pub task: TaskSelect,
    pub min_eval: usize,
    pub max_genres: usize,
    pub synthetic: SyntheticSpec,
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub net_dropout: f32,
    pub channel_hidden: usize,
    pub message_dim: usize,
    pub channel_dropout: f32,
    pub train: TrainConfig,
    /// Fully-resolved key/value view, for persistence.
    pub resolved: ConfigMap,
}

const KNOWN_KEYS: &[&str] = &[
    "method",
    "seed",
    "out",
    "data.kind",
    "data.dir",
    "data.task",
    "data.min_eval",
    "data.max_genres",
    "synthetic.input_dim",
    "synthetic.subpops",
    "synthetic.mixture",
    "synthetic.downstream_subpop",
    "synthetic.noise_std",
    "synthetic.pretrain_train",
    "synthetic.pretrain_eval",
    "synthetic.downstream_train",
    "synthetic.downstream_eval",
    "synthetic.seed",
    "synthetic.mean_scale",
    "synthetic.weight_shift",
    "synthetic.downstream_shift",
    "teacher.hidden",
    "student.hidden",
    "net.dropout",
    "channel.hidden",
    "channel.message_dim",
    "channel.dropout",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.eval_every",
    "td.k",
    "td.w1",
    "td.w2",
    "td.w3",
    "td.noise_sigma",
    "td.rampup.student_steps",
    "td.rampup.channel_steps",
    "loss.logit",
    "loss.feature",
    "loss.fitnet",
    "loss.hybrid_logit",
    "loss.hybrid_feature",
    "sweep.seeds",
    "sweep.max_runs",
    "sweep.jobs",
];

pub fn defaults() -> ConfigMap {
    let mut m = ConfigMap::default();
    let data_dir = std::env::var("TD_DATA_DIR").unwrap_or_else(|_| "data".into());
    let spec = SyntheticSpec::default();
    let pairs: Vec<(&str, String)> = vec![
        ("method", "scratch".into()),
        ("seed", "1".into()),
        ("out", "runs/run".into()),
        ("data.kind", "synthetic".into()),
        ("data.dir", data_dir),
        ("data.task", "downstream".into()),
        ("data.min_eval", "500".into()),
        ("data.max_genres", "8".into()),
        ("synthetic.input_dim", spec.input_dim.to_string()),
        ("synthetic.subpops", spec.subpops.to_string()),
        (
            "synthetic.mixture",
            spec.mixture.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("synthetic.downstream_subpop", spec.downstream_subpop.to_string()),
        ("synthetic.noise_std", spec.noise_std.to_string()),
        ("synthetic.pretrain_train", spec.pretrain_train.to_string()),
        ("synthetic.pretrain_eval", spec.pretrain_eval.to_string()),
        ("synthetic.downstream_train", spec.downstream_train.to_string()),
        ("synthetic.downstream_eval", spec.downstream_eval.to_string()),
        ("synthetic.seed", spec.seed.to_string()),
        ("synthetic.mean_scale", spec.mean_scale.to_string()),
        ("synthetic.weight_shift", spec.weight_shift.to_string()),
        ("synthetic.downstream_shift", spec.downstream_shift.to_string()),
        ("teacher.hidden", "512,256".into()),
        ("student.hidden", "128,64".into()),
        ("net.dropout", "0.1".into()),
        ("channel.hidden", "256".into()),
        ("channel.message_dim", "128".into()),
        ("channel.dropout", "0.1".into()),
        ("train.steps", "2000".into()),
        ("train.batch_size", "128".into()),
        ("train.lr", "0.001".into()),
        ("train.eval_every", "200".into()),
        ("td.k", "2".into()),
        ("td.w1", "1".into()),
        ("td.w2", "0.1".into()),
        ("td.w3", "0.1".into()),
        ("td.noise_sigma", "".into()),
        ("td.rampup.student_steps", "0".into()),
        ("td.rampup.channel_steps", "0".into()),
        ("loss.logit", "1".into()),
        ("loss.feature", "1".into()),
        ("loss.fitnet", "1".into()),
        ("loss.hybrid_logit", "0.5".into()),
        ("loss.hybrid_feature", "0.5".into()),
        ("sweep.seeds", "1,2,3,4,5".into()),
        ("sweep.max_runs", "256".into()),
        ("sweep.jobs", "1".into()),
    ];
    for (k, v) in pairs {
        m.set(k, &v);
    }
    m
}

fn check_known_keys(map: &ConfigMap) -> Result<()> {
    for key in map.keys() {
        let known = KNOWN_KEYS.contains(&key) || key.starts_with("sweep.vary.");
        if !known {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
    }
    Ok(())
}

fn hidden_pair(map: &ConfigMap, key: &str) -> Result<Vec<usize>> {
    let hidden = map.get_list_usize(key)?;
    if hidden.len() < 2 {
        return Err(Error::Config(format!(
            "key '{key}': need at least two hidden layers for the state partition"
        )));
    }
    if hidden.iter().any(|h| *h == 0) {
        return Err(Error::Config(format!("key '{key}': layer widths must be positive")));
    }
    Ok(hidden)
}

/// Resolve defaults <- file <- overrides into a typed config.
pub fn resolve(file: Option<&ConfigMap>, overrides: &ConfigMap) -> Result<ExperimentConfig> {
    if let Some(f) = file {
        check_known_keys(f)?;
    }
    check_known_keys(overrides)?;
    let mut map = defaults();
    if let Some(f) = file {
        map.apply(f);
    }
    map.apply(overrides);

    let method = Method::parse(map.required("method")?)?;
    let data_kind = match map.required("data.kind")? {
        "movielens" => DataKind::MovieLens,
        "synthetic" => DataKind::Synthetic,
        other => {
            return Err(Error::Config(format!(
                "data.kind must be movielens or synthetic, got '{other}'"
            )))
        }
    };
    let task = TaskSelect::parse(map.required("data.task")?)?;
    match (&data_kind, &task) {
        (DataKind::MovieLens, TaskSelect::Downstream) => {
            return Err(Error::Config(
                "data.task=downstream is for synthetic data; use genre:<name> or rank:<n>".into(),
            ))
        }
        (DataKind::Synthetic, TaskSelect::Genre(_)) | (DataKind::Synthetic, TaskSelect::Rank(_)) => {
            return Err(Error::Config(
                "genre tasks apply to movielens data; use pretrain or downstream".into(),
            ))
        }
        _ => {}
    }

    let mixture = map.get_list_f32("synthetic.mixture")?;
    let synthetic = SyntheticSpec {
        input_dim: map.get_usize("synthetic.input_dim")?,
        subpops: map.get_usize("synthetic.subpops")?,
        mixture,
        downstream_subpop: map.get_usize("synthetic.downstream_subpop")?,
        noise_std: map.get_f32("synthetic.noise_std")?,
        pretrain_train: map.get_usize("synthetic.pretrain_train")?,
        pretrain_eval: map.get_usize("synthetic.pretrain_eval")?,
        downstream_train: map.get_usize("synthetic.downstream_train")?,
        downstream_eval: map.get_usize("synthetic.downstream_eval")?,
        seed: map.get_u64("synthetic.seed")?,
        mean_scale: map.get_f32("synthetic.mean_scale")?,
        weight_shift: map.get_f32("synthetic.weight_shift")?,
        downstream_shift: map.get_f32("synthetic.downstream_shift")?,
    };
    if data_kind == DataKind::Synthetic {
        synthetic.validate()?;
    }

    let ramp_student = map.get_usize("td.rampup.student_steps")?;
    let ramp_channel = map.get_usize("td.rampup.channel_steps")?;
    let ramp_up = if ramp_student + ramp_channel > 0 {
        Some(RampUp { student_steps: ramp_student, channel_steps: ramp_channel })
    } else {
        None
    };
    let weights = LossWeights {
        interact: map.get_f32("td.w1")?,
        mc: map.get_f32("td.w2")?,
        sc: map.get_f32("td.w3")?,
        logit: map.get_f32("loss.logit")?,
        feature: map.get_f32("loss.feature")?,
        fitnet: map.get_f32("loss.fitnet")?,
        hybrid_logit: map.get_f32("loss.hybrid_logit")?,
        hybrid_feature: map.get_f32("loss.hybrid_feature")?,
    };
    let train = TrainConfig {
        method,
        iterations: map.get_usize("td.k")?,
        weights,
        noise_sigma: map.get_opt_f32("td.noise_sigma")?,
        ramp_up,
        train_steps: map.get_usize("train.steps")?,
        batch_size: map.get_usize("train.batch_size")?,
        lr: map.get_f32("train.lr")?,
        seed: map.get_u64("seed")?,
        eval_every: map.get_usize("train.eval_every")?,
    };
    train.validate()?;

    let cfg = ExperimentConfig {
        method,
        seed: train.seed,
        out: PathBuf::from(map.required("out")?),
        data_kind,
        data_dir: PathBuf::from(map.required("data.dir")?),
        task,
        min_eval: map.get_usize("data.min_eval")?,
        max_genres: map.get_usize("data.max_genres")?,
        synthetic,
        teacher_hidden: hidden_pair(&map, "teacher.hidden")?,
        student_hidden: hidden_pair(&map, "student.hidden")?,
        net_dropout: map.get_f32("net.dropout")?,
        channel_hidden: map.get_usize("channel.hidden")?,
        message_dim: map.get_usize("channel.message_dim")?,
        channel_dropout: map.get_f32("channel.dropout")?,
        train,
        resolved: map,
    };
    if !(0.0..1.0).contains(&cfg.net_dropout) || !(0.0..1.0).contains(&cfg.channel_dropout) {
        return Err(Error::Config("dropout rates must be in [0, 1)".into()));
    }
    Ok(cfg)
}

impl ExperimentConfig {
    /// Net config for the given hidden stack over a given input width.
    pub fn net_config(&self, hidden: &[usize], input_width: usize) -> Result<NetConfig> {
        Ok(NetConfig {
            input_width,
            hidden: hidden.to_vec(),
            output_width: 1,
            dropout: self.net_dropout,
            partition: LayerPartition::new(1, hidden.len(), hidden.len() + 1)?,
        })
    }

    pub fn teacher_net_config(&self, input_width: Option<usize>) -> Result<NetConfig> {
        self.net_config(
            &self.teacher_hidden.clone(),
            input_width.unwrap_or(SPARSE_INPUT_WIDTH),
        )
    }

    pub fn student_net_config(&self, input_width: Option<usize>) -> Result<NetConfig> {
        self.net_config(
            &self.student_hidden.clone(),
            input_width.unwrap_or(SPARSE_INPUT_WIDTH),
        )
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.resolved.to_text())?;
        Ok(())
    }
}
