//! Dataset ingestion and task construction.
//!
//! MovieLens-100K is read from its native files (`u.data` tab-separated
//! ratings, `u.item` pipe-separated movie metadata with 19 trailing genre
//! flags). The corpus is split by global timestamp: the earliest 90% of
//! events train, the latest 10% evaluate, with boundary ties going to the
//! training side. Downstream tasks filter by genre after the split, so
//! their splits are subsets of the global ones.
//!
//! The synthetic generator produces a mixture of per-subpopulation affine
//! regression tasks sharing a common weight direction: pre-training sees
//! the mixture, the downstream task sees one subpopulation, reproducing a
//! distribution shift between pre-training data and the downstream task at
//! desk scale.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nets::{BatchInput, FeatureDims, SparseBatch};
use crate::rng::Rng;

pub const GENRE_COUNT: usize = 19;
pub const GENRE_NAMES: [&str; GENRE_COUNT] = [
    "unknown",
    "action",
    "adventure",
    "animation",
    "childrens",
    "comedy",
    "crime",
    "documentary",
    "drama",
    "fantasy",
    "film-noir",
    "horror",
    "musical",
    "mystery",
    "romance",
    "sci-fi",
    "thriller",
    "war",
    "western",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingExample {
    pub user: u32,
    pub movie: u32,
    pub rating: f32,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default)]
pub struct MovieInfo {
    pub title_tokens: Vec<String>,
    /// Genre indices into GENRE_NAMES; never empty (all-zero flag rows map
    /// to the explicit "unknown" genre).
    pub genres: Vec<u8>,
}

#[derive(Debug, Default)]
pub struct Corpus {
    pub examples: Vec<RatingExample>,
    /// Indexed by movie id; ids are the dataset's native 1-based ids.
    pub movies: Vec<Option<MovieInfo>>,
    pub n_users: usize,
    pub warnings: Vec<String>,
}

/// Lowercase, split on non-alphanumeric, drop year parentheticals such as
/// "(1995)". Other parenthesized content (alternate titles) is kept.
pub fn tokenize_title(title: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(title.len());
    let bytes: Vec<char> = title.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == '(' {
            // Scan ahead for a pure-year group.
            let mut j = i + 1;
            let mut digits = 0;
            while j < bytes.len() && bytes[j] != ')' {
                if bytes[j].is_ascii_digit() {
                    digits += 1;
                } else {
                    digits = -1000;
                }
                j += 1;
            }
            if j < bytes.len() && digits == 4 {
                i = j + 1;
                continue;
            }
        }
        cleaned.push(bytes[i]);
        i += 1;
    }
    cleaned
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Parse the MovieLens-100K directory (`u.data` + `u.item`).
pub fn ingest_movielens(dir: &Path) -> Result<Corpus> {
    let data_path = dir.join("u.data");
    let item_path = dir.join("u.item");
    for p in [&data_path, &item_path] {
        if !p.exists() {
            return Err(Error::Data(format!("missing dataset file {}", p.display())));
        }
    }
    let mut corpus = Corpus::default();

    // u.item is latin-1 in the original distribution; decode lossily and
    // record how many titles needed replacement characters.
    let raw = fs::read(&item_path)?;
    let text = String::from_utf8_lossy(&raw);
    if text.contains('\u{FFFD}') {
        let n = text.matches('\u{FFFD}').count();
        corpus
            .warnings
            .push(format!("u.item: {n} non-UTF8 bytes replaced with U+FFFD"));
    }
    let mut max_movie = 0usize;
    let mut parsed_items: Vec<(usize, MovieInfo)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() < 2 + GENRE_COUNT {
            return Err(Error::Data(format!(
                "u.item line {}: expected at least {} pipe-separated fields, got {}",
                lineno + 1,
                2 + GENRE_COUNT,
                fields.len()
            )));
        }
        let id: usize = fields[0].parse().map_err(|_| {
            Error::Data(format!("u.item line {}: bad movie id '{}'", lineno + 1, fields[0]))
        })?;
        let flags = &fields[fields.len() - GENRE_COUNT..];
        let mut genres: Vec<u8> = Vec::new();
        for (gi, flag) in flags.iter().enumerate() {
            match *flag {
                "0" => {}
                "1" => genres.push(gi as u8),
                other => {
                    return Err(Error::Data(format!(
                        "u.item line {}: bad genre flag '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        if genres.is_empty() {
            genres.push(0); // unknown
        }
        let info = MovieInfo { title_tokens: tokenize_title(fields[1]), genres };
        max_movie = max_movie.max(id);
        parsed_items.push((id, info));
    }
    corpus.movies = vec![None; max_movie + 1];
    for (id, info) in parsed_items {
        corpus.movies[id] = Some(info);
    }

    let data = fs::read_to_string(&data_path)?;
    let mut max_user = 0u32;
    for (lineno, line) in data.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "u.data line {}: expected 4 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let user: u32 = fields[0].parse().map_err(|_| {
            Error::Data(format!("u.data line {}: bad user id '{}'", lineno + 1, fields[0]))
        })?;
        let movie: u32 = fields[1].parse().map_err(|_| {
            Error::Data(format!("u.data line {}: bad movie id '{}'", lineno + 1, fields[1]))
        })?;
        let rating: f32 = fields[2].parse().map_err(|_| {
            Error::Data(format!("u.data line {}: bad rating '{}'", lineno + 1, fields[2]))
        })?;
        let timestamp: i64 = fields[3].parse().map_err(|_| {
            Error::Data(format!("u.data line {}: bad timestamp '{}'", lineno + 1, fields[3]))
        })?;
        if !(1.0..=5.0).contains(&rating) {
            return Err(Error::Data(format!(
                "u.data line {}: rating {rating} outside [1,5]",
                lineno + 1
            )));
        }
        if corpus.movies.get(movie as usize).map(|m| m.is_none()).unwrap_or(true) {
            return Err(Error::Data(format!(
                "u.data line {}: movie id {movie} not present in u.item",
                lineno + 1
            )));
        }
        max_user = max_user.max(user);
        corpus.examples.push(RatingExample { user, movie, rating, timestamp });
    }
    corpus.n_users = max_user as usize + 1;
    Ok(corpus)
}

/// Example-index split for one task. Indices point into `Corpus::examples`.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub train: Vec<u32>,
    pub eval: Vec<u32>,
    pub boundary_ts: i64,
}

/// Title-token vocabulary and table sizes, built from the global training
/// split only. Out-of-vocabulary tokens are dropped at encode time.
#[derive(Debug, Clone)]
pub struct FeatureVocab {
    pub title_ids: HashMap<String, u32>,
    pub dims: FeatureDims,
}

/// Global time split plus per-genre downstream tasks: genres with more
/// than `min_eval` eval examples, densest first, capped at `max_tasks`.
pub fn make_tasks(
    corpus: &Corpus,
    min_eval: usize,
    max_tasks: usize,
) -> Result<(TaskSpec, Vec<TaskSpec>, FeatureVocab)> {
    if corpus.examples.is_empty() {
        return Err(Error::Data("corpus has no examples".into()));
    }
    let n = corpus.examples.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by_key(|&i| (corpus.examples[i as usize].timestamp, i));
    let boundary_pos = (n * 9).div_ceil(10).saturating_sub(1);
    let boundary_ts = corpus.examples[order[boundary_pos] as usize].timestamp;

    let mut train: Vec<u32> = Vec::new();
    let mut eval: Vec<u32> = Vec::new();
    for i in 0..n as u32 {
        if corpus.examples[i as usize].timestamp <= boundary_ts {
            train.push(i);
        } else {
            eval.push(i);
        }
    }
    if eval.is_empty() {
        return Err(Error::Data("time split produced an empty eval set".into()));
    }

    // Vocabulary from training-split movie titles only.
    let mut title_ids: HashMap<String, u32> = HashMap::new();
    let mut seen: Vec<bool> = vec![false; corpus.movies.len()];
    for &i in &train {
        let movie = corpus.examples[i as usize].movie as usize;
        if seen[movie] {
            continue;
        }
        seen[movie] = true;
        if let Some(info) = &corpus.movies[movie] {
            for tok in &info.title_tokens {
                let next = title_ids.len() as u32;
                title_ids.entry(tok.clone()).or_insert(next);
            }
        }
    }
    let vocab = FeatureVocab {
        dims: FeatureDims {
            users: corpus.n_users,
            movies: corpus.movies.len(),
            title_vocab: title_ids.len(),
            genres: GENRE_COUNT,
        },
        title_ids,
    };

    let pretrain = TaskSpec { name: "pretrain".into(), train, eval, boundary_ts };

    let mut per_genre: Vec<(usize, TaskSpec)> = Vec::new();
    for g in 0..GENRE_COUNT {
        let has_genre = |idx: &u32| -> bool {
            let movie = corpus.examples[*idx as usize].movie as usize;
            corpus.movies[movie]
                .as_ref()
                .map(|m| m.genres.contains(&(g as u8)))
                .unwrap_or(false)
        };
        let g_train: Vec<u32> = pretrain.train.iter().filter(|i| has_genre(i)).copied().collect();
        let g_eval: Vec<u32> = pretrain.eval.iter().filter(|i| has_genre(i)).copied().collect();
        if g_eval.len() > min_eval && !g_train.is_empty() {
            per_genre.push((
                g_eval.len(),
                TaskSpec {
                    name: format!("genre-{}", GENRE_NAMES[g]),
                    train: g_train,
                    eval: g_eval,
                    boundary_ts,
                },
            ));
        }
    }
    if per_genre.is_empty() {
        return Err(Error::Data(format!(
            "no genre has more than {min_eval} eval examples"
        )));
    }
    per_genre.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.name.cmp(&b.1.name)));
    per_genre.truncate(max_tasks);
    let downstream: Vec<TaskSpec> = per_genre.into_iter().map(|(_, t)| t).collect();
    Ok((pretrain, downstream, vocab))
}

// ── Synthetic distribution-shift generator ──────────────────────────────

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub input_dim: usize,
    pub subpops: usize,
    /// Pre-training mixture over subpopulations.
    pub mixture: Vec<f32>,
    /// The downstream task draws only this subpopulation.
    pub downstream_subpop: usize,
    pub noise_std: f32,
    pub pretrain_train: usize,
    pub pretrain_eval: usize,
    pub downstream_train: usize,
    pub downstream_eval: usize,
    pub seed: u64,
    /// Spread of per-subpopulation input means.
    pub mean_scale: f32,
    /// Deviation of each subpopulation's weights from the shared direction.
    pub weight_shift: f32,
    /// Constant target offset applied only to the downstream task (train
    /// and eval): the downstream label function differs from what the
    /// teacher saw in pre-training, so teacher predictions carry a bias
    /// while teacher representations stay transferable.
    pub downstream_shift: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            input_dim: 16,
            subpops: 5,
            mixture: vec![0.30, 0.25, 0.20, 0.15, 0.10],
            downstream_subpop: 4,
            noise_std: 0.1,
            pretrain_train: 8000,
            pretrain_eval: 2000,
            downstream_train: 160,
            downstream_eval: 1000,
            seed: 1,
            mean_scale: 1.0,
            weight_shift: 0.5,
            downstream_shift: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.subpops == 0 {
            return Err(Error::Config("input_dim and subpops must be positive".into()));
        }
        if self.mixture.len() != self.subpops {
            return Err(Error::Config(format!(
                "mixture has {} weights for {} subpopulations",
                self.mixture.len(),
                self.subpops
            )));
        }
        if self.mixture.iter().any(|w| *w < 0.0) || self.mixture.iter().sum::<f32>() <= 0.0 {
            return Err(Error::Config("mixture weights must be non-negative and not all zero".into()));
        }
        if self.downstream_subpop >= self.subpops {
            return Err(Error::Config(format!(
                "downstream subpopulation {} out of range (have {})",
                self.downstream_subpop, self.subpops
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        let sizes = [
            self.pretrain_train,
            self.pretrain_eval,
            self.downstream_train,
            self.downstream_eval,
        ];
        if sizes.iter().any(|s| *s == 0) {
            return Err(Error::Config("all split sizes must be positive".into()));
        }
        Ok(())
    }
}

/// In-memory dense regression dataset.
#[derive(Debug, Clone)]
pub struct DenseDataset {
    pub input_width: usize,
    pub train_x: Vec<f32>,
    pub train_y: Vec<f32>,
    pub eval_x: Vec<f32>,
    pub eval_y: Vec<f32>,
    /// Optional per-eval-example bucket labels (subpopulation for synthetic
    /// data); used by the representation analysis.
    pub eval_buckets: Option<Vec<u32>>,
}

impl DenseDataset {
    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn eval_len(&self) -> usize {
        self.eval_y.len()
    }
}

struct SubpopModel {
    mean: Vec<f32>,
    w: Vec<f32>,
    b: f32,
}

fn build_subpops(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<SubpopModel> {
    let d = spec.input_dim;
    let scale = 1.0 / (d as f32).sqrt();
    let w_shared: Vec<f32> = (0..d).map(|_| rng.normal() * scale).collect();
    let b_shared = rng.uniform(-0.5, 0.5);
    (0..spec.subpops)
        .map(|_| {
            let mean: Vec<f32> = (0..d).map(|_| rng.normal() * spec.mean_scale).collect();
            let w: Vec<f32> = w_shared
                .iter()
                .map(|ws| ws + spec.weight_shift * rng.normal() * scale)
                .collect();
            let b = b_shared + spec.weight_shift * rng.uniform(-1.0, 1.0);
            SubpopModel { mean, w, b }
        })
        .collect()
}

fn sample_split(
    spec: &SyntheticSpec,
    pops: &[SubpopModel],
    n: usize,
    fixed_pop: Option<usize>,
    rng: &mut Rng,
) -> (Vec<f32>, Vec<f32>, Vec<u32>) {
    let target_shift = if fixed_pop.is_some() { spec.downstream_shift as f64 } else { 0.0 };
    let d = spec.input_dim;
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = fixed_pop.unwrap_or_else(|| rng.categorical(&spec.mixture));
        let pop = &pops[c];
        let mut y = pop.b as f64 + target_shift;
        for j in 0..d {
            let x = pop.mean[j] + rng.normal();
            xs.push(x);
            y += pop.w[j] as f64 * x as f64;
        }
        if spec.noise_std > 0.0 {
            y += (spec.noise_std * rng.normal()) as f64;
        }
        ys.push(y as f32);
        labels.push(c as u32);
    }
    (xs, ys, labels)
}

/// Generate the pre-training mixture task and the single-subpopulation
/// downstream task. Regeneration with the same spec is bit-identical.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(DenseDataset, DenseDataset)> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.seed, "synthetic");
    let pops = build_subpops(spec, &mut rng);

    let (ptx, pty, _) = sample_split(spec, &pops, spec.pretrain_train, None, &mut rng);
    let (pex, pey, pel) = sample_split(spec, &pops, spec.pretrain_eval, None, &mut rng);
    let (dtx, dty, _) =
        sample_split(spec, &pops, spec.downstream_train, Some(spec.downstream_subpop), &mut rng);
    let (dex, dey, del) =
        sample_split(spec, &pops, spec.downstream_eval, Some(spec.downstream_subpop), &mut rng);

    let pretrain = DenseDataset {
        input_width: spec.input_dim,
        train_x: ptx,
        train_y: pty,
        eval_x: pex,
        eval_y: pey,
        eval_buckets: Some(pel),
    };
    let downstream = DenseDataset {
        input_width: spec.input_dim,
        train_x: dtx,
        train_y: dty,
        eval_x: dex,
        eval_y: dey,
        eval_buckets: Some(del),
    };
    Ok((pretrain, downstream))
}

// ── Unified task handle for the engine ───────────────────────────────────

/// One batch of training or eval data, owned.
#[derive(Debug, Clone)]
pub struct OwnedBatch {
    pub input: OwnedInput,
    pub targets: Vec<f32>,
}

#[derive(Debug, Clone)]
pub enum OwnedInput {
    Dense { width: usize, values: Vec<f32> },
    Sparse(SparseBatch),
}

impl OwnedInput {
    pub fn as_input(&self) -> BatchInput<'_> {
        match self {
            OwnedInput::Dense { width, values } => {
                BatchInput::Dense { width: *width, values }
            }
            OwnedInput::Sparse(batch) => BatchInput::Sparse(batch),
        }
    }
}

/// A MovieLens task bound to its corpus and vocabulary.
#[derive(Debug, Clone)]
pub struct SparseTask {
    pub corpus: Arc<Corpus>,
    pub vocab: Arc<FeatureVocab>,
    pub spec: TaskSpec,
}

impl SparseTask {
    fn build_batch(&self, indices: &[u32]) -> OwnedBatch {
        let mut batch = SparseBatch::default();
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = &self.corpus.examples[i as usize];
            let info = self.corpus.movies[ex.movie as usize].as_ref().expect("validated at ingest");
            batch.users.push(ex.user);
            batch.movies.push(ex.movie);
            batch.title_tokens.push(
                info.title_tokens
                    .iter()
                    .filter_map(|t| self.vocab.title_ids.get(t).copied())
                    .collect(),
            );
            batch.genres.push(info.genres.iter().map(|g| *g as u32).collect());
            targets.push(ex.rating);
        }
        OwnedBatch { input: OwnedInput::Sparse(batch), targets }
    }
}

pub enum TaskData {
    Dense(DenseDataset),
    Sparse(SparseTask),
}

impl TaskData {
    pub fn train_len(&self) -> usize {
        match self {
            TaskData::Dense(d) => d.train_len(),
            TaskData::Sparse(t) => t.spec.train.len(),
        }
    }

    pub fn eval_len(&self) -> usize {
        match self {
            TaskData::Dense(d) => d.eval_len(),
            TaskData::Sparse(t) => t.spec.eval.len(),
        }
    }

    pub fn input_width(&self) -> Option<usize> {
        match self {
            TaskData::Dense(d) => Some(d.input_width),
            TaskData::Sparse(_) => None,
        }
    }

    pub fn feature_dims(&self) -> Option<FeatureDims> {
        match self {
            TaskData::Dense(_) => None,
            TaskData::Sparse(t) => Some(t.vocab.dims),
        }
    }

    /// Uniform sample with replacement from the training split.
    pub fn sample_train_batch(&self, rng: &mut Rng, batch_size: usize) -> Result<OwnedBatch> {
        if self.train_len() == 0 {
            return Err(Error::Data("train split is empty".into()));
        }
        match self {
            TaskData::Dense(d) => {
                let w = d.input_width;
                let mut values = Vec::with_capacity(batch_size * w);
                let mut targets = Vec::with_capacity(batch_size);
                for _ in 0..batch_size {
                    let i = rng.index(d.train_len());
                    values.extend_from_slice(&d.train_x[i * w..(i + 1) * w]);
                    targets.push(d.train_y[i]);
                }
                Ok(OwnedBatch { input: OwnedInput::Dense { width: w, values }, targets })
            }
            TaskData::Sparse(t) => {
                let indices: Vec<u32> = (0..batch_size)
                    .map(|_| t.spec.train[rng.index(t.spec.train.len())])
                    .collect();
                Ok(t.build_batch(&indices))
            }
        }
    }

    /// Eval examples [range.start, range.end), in split order.
    pub fn eval_batch(&self, range: Range<usize>) -> Result<OwnedBatch> {
        if range.end > self.eval_len() {
            return Err(Error::Data(format!(
                "eval range {range:?} out of bounds ({} examples)",
                self.eval_len()
            )));
        }
        match self {
            TaskData::Dense(d) => {
                let w = d.input_width;
                Ok(OwnedBatch {
                    input: OwnedInput::Dense {
                        width: w,
                        values: d.eval_x[range.start * w..range.end * w].to_vec(),
                    },
                    targets: d.eval_y[range.clone()].to_vec(),
                })
            }
            TaskData::Sparse(t) => Ok(t.build_batch(&t.spec.eval[range])),
        }
    }

    /// Bucket label per eval example: rating value for MovieLens tasks,
    /// subpopulation (when recorded) for dense tasks.
    pub fn eval_bucket_labels(&self) -> Vec<u32> {
        match self {
            TaskData::Dense(d) => match &d.eval_buckets {
                Some(b) => b.clone(),
                None => vec![0; d.eval_len()],
            },
            TaskData::Sparse(t) => t
                .spec
                .eval
                .iter()
                .map(|&i| t.corpus.examples[i as usize].rating.round() as u32)
                .collect(),
        }
    }
}

// ── Materialized split files (columnar text, for inspection) ────────────

fn write_tsv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

/// Write train/eval TSVs for a dense dataset.
pub fn write_dense_task(dir: &Path, name: &str, ds: &DenseDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = {
        let mut h = String::from("y");
        for j in 0..ds.input_width {
            h.push_str(&format!("\tx{j}"));
        }
        h
    };
    let row = |x: &[f32], y: f32| {
        let mut line = format!("{y}");
        for v in x {
            line.push_str(&format!("\t{v}"));
        }
        line
    };
    write_tsv(
        &dir.join(format!("{name}_train.tsv")),
        &header,
        (0..ds.train_len()).map(|i| {
            row(&ds.train_x[i * ds.input_width..(i + 1) * ds.input_width], ds.train_y[i])
        }),
    )?;
    write_tsv(
        &dir.join(format!("{name}_eval.tsv")),
        &header,
        (0..ds.eval_len()).map(|i| {
            row(&ds.eval_x[i * ds.input_width..(i + 1) * ds.input_width], ds.eval_y[i])
        }),
    )
}

/// Write train/eval TSVs for a MovieLens task split.
pub fn write_sparse_task(dir: &Path, corpus: &Corpus, spec: &TaskSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = "user_id\tmovie_id\trating\ttimestamp";
    let row = |i: &u32| {
        let ex = &corpus.examples[*i as usize];
        format!("{}\t{}\t{}\t{}", ex.user, ex.movie, ex.rating, ex.timestamp)
    };
    write_tsv(&dir.join(format!("{}_train.tsv", spec.name)), header, spec.train.iter().map(row))?;
    write_tsv(&dir.join(format!("{}_eval.tsv", spec.name)), header, spec.eval.iter().map(row))
}
