//! Representation-similarity analysis and evaluation metrics.
//!
//! Linear CKA in feature-space form: with column-centered X and Y over the
//! same N probe examples,
//!
//!   cka(X, Y) = ||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F)
//!
//! which is invariant to orthogonal transforms and isotropic scaling of
//! either argument. The similarity grid compares the five representation
//! sets (student lower/higher states, the student message space, teacher
//! lower/higher states) pairwise, per class bucket.

use crate::comm::CommChannel;
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::nets::PartitionedNet;
use crate::rng::Rng;
use crate::tape::{Mode, Tape};

/// Activations for one labeled representation over N probe examples.
#[derive(Debug, Clone)]
pub struct RepresentationSet {
    pub label: String,
    pub rows: usize,
    pub dims: usize,
    pub data: Vec<f32>,
}

/// Column-center a row-major matrix in f64.
fn centered(data: &[f32], rows: usize, dims: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * dims];
    for j in 0..dims {
        let mut mean = 0.0f64;
        for r in 0..rows {
            mean += data[r * dims + j] as f64;
        }
        mean /= rows as f64;
        for r in 0..rows {
            out[r * dims + j] = data[r * dims + j] as f64 - mean;
        }
    }
    out
}

/// Frobenius norm squared of A^T B where A is n x da and B is n x db.
fn cross_norm_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut total = 0.0f64;
    for i in 0..da {
        for j in 0..db {
            let mut dot = 0.0f64;
            for r in 0..n {
                dot += a[r * da + i] * b[r * db + j];
            }
            total += dot * dot;
        }
    }
    total
}

/// Linear CKA between two representation matrices over the same N examples
/// (rows). Returns 0 when either argument has zero centered norm.
pub fn linear_cka(x: &[f32], dx: usize, y: &[f32], dy: usize) -> Result<f64> {
    if dx == 0 || dy == 0 || x.len() % dx != 0 || y.len() % dy != 0 {
        return Err(Error::Shape(format!(
            "cka matrices must be rectangular, got {}x? ({dx} cols) and {}x? ({dy} cols)",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() / dx;
    if y.len() / dy != n {
        return Err(Error::Shape(format!(
            "cka needs the same probe count: {} vs {}",
            n,
            y.len() / dy
        )));
    }
    if n < 2 {
        return Err(Error::Shape(format!("cka needs at least 2 probe examples, got {n}")));
    }
    let xc = centered(x, n, dx);
    let yc = centered(y, n, dy);
    let cross = cross_norm_sq(&yc, dy, &xc, dx, n);
    let x_self = cross_norm_sq(&xc, dx, &xc, dx, n).sqrt();
    let y_self = cross_norm_sq(&yc, dy, &yc, dy, n).sqrt();
    if x_self == 0.0 || y_self == 0.0 {
        return Ok(0.0);
    }
    Ok(cross / (x_self * y_self))
}

/// Pairwise CKA over a list of labeled representation sets.
#[derive(Debug, Clone)]
pub struct SimilarityGrid {
    pub bucket: u32,
    pub labels: Vec<String>,
    /// Row-major labels.len() x labels.len() CKA values.
    pub values: Vec<f64>,
}

impl SimilarityGrid {
    pub fn get(&self, row_label: &str, col_label: &str) -> Option<f64> {
        let r = self.labels.iter().position(|l| l == row_label)?;
        let c = self.labels.iter().position(|l| l == col_label)?;
        Some(self.values[r * self.labels.len() + c])
    }
}

pub fn grid_from_sets(bucket: u32, sets: &[RepresentationSet]) -> Result<SimilarityGrid> {
    let k = sets.len();
    let mut values = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..k {
            values[i * k + j] =
                linear_cka(&sets[i].data, sets[i].dims, &sets[j].data, sets[j].dims)?;
        }
    }
    Ok(SimilarityGrid {
        bucket,
        labels: sets.iter().map(|s| s.label.clone()).collect(),
        values,
    })
}

/// The five probe representations for a batch of eval examples, eval mode.
pub fn collect_representations(
    teacher: &PartitionedNet,
    student: &PartitionedNet,
    student_channel: &CommChannel,
    task: &TaskData,
    indices: &[usize],
) -> Result<Vec<RepresentationSet>> {
    let mut unused = Rng::new(0);
    let mut tape = Tape::new();
    // Gather the probe examples one contiguous batch at a time.
    let mut batches = Vec::new();
    for &i in indices {
        batches.push(task.eval_batch(i..i + 1)?);
    }
    // Merge into a single batch by concatenating forward results row-wise;
    // simpler: run per-example and stack the activations.
    let n = indices.len();
    let mut sets: Vec<RepresentationSet> = Vec::new();
    let push_rows = |label: &str, dims: usize, rows: Vec<Vec<f32>>, sets: &mut Vec<RepresentationSet>| {
        let mut data = Vec::with_capacity(n * dims);
        for r in rows {
            data.extend(r);
        }
        sets.push(RepresentationSet { label: label.into(), rows: n, dims, data });
    };
    let mut s_g_rows = Vec::new();
    let mut e_g_rows = Vec::new();
    let mut m_g_rows = Vec::new();
    let mut s_h_rows = Vec::new();
    let mut e_h_rows = Vec::new();
    for batch in &batches {
        let input = batch.input.as_input();
        let (_, st_g) = student.forward_with_taps(&mut tape, &input, Mode::Eval, &mut unused)?;
        let m_g = student_channel.encode(&mut tape, &st_g, Mode::Eval, &mut unused)?;
        let (_, st_h) = teacher.forward_with_taps(&mut tape, &input, Mode::Eval, &mut unused)?;
        s_g_rows.push(tape.value(st_g.s).to_vec());
        e_g_rows.push(tape.value(st_g.e).to_vec());
        m_g_rows.push(tape.value(m_g).to_vec());
        s_h_rows.push(tape.value(st_h.s).to_vec());
        e_h_rows.push(tape.value(st_h.e).to_vec());
    }
    push_rows("s_g", student.s_width(), s_g_rows, &mut sets);
    push_rows("e_g", student.e_width(), e_g_rows, &mut sets);
    let m_dim = student_channel
        .encoder
        .as_ref()
        .map(|e| e.message_dim())
        .ok_or_else(|| Error::Shape("student channel has no encoder for message probing".into()))?;
    push_rows("m_g", m_dim, m_g_rows, &mut sets);
    push_rows("s_h", teacher.s_width(), s_h_rows, &mut sets);
    push_rows("e_h", teacher.e_width(), e_h_rows, &mut sets);
    Ok(sets)
}

/// Per-bucket pairwise CKA grids over `per_class_n` probe examples each.
/// Buckets with fewer examples produce a warning and use what they have;
/// buckets with fewer than 2 are skipped (CKA undefined).
pub fn probe_and_grid(
    teacher: &PartitionedNet,
    student: &PartitionedNet,
    student_channel: &CommChannel,
    task: &TaskData,
    per_class_n: usize,
) -> Result<(Vec<SimilarityGrid>, Vec<String>)> {
    let labels = task.eval_bucket_labels();
    let mut buckets: Vec<u32> = labels.to_vec();
    buckets.sort_unstable();
    buckets.dedup();
    let mut grids = Vec::new();
    let mut warnings = Vec::new();
    for bucket in buckets {
        let indices: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == bucket)
            .map(|(i, _)| i)
            .take(per_class_n)
            .collect();
        if indices.len() < per_class_n {
            warnings.push(format!(
                "bucket {bucket}: only {} eval examples (wanted {per_class_n})",
                indices.len()
            ));
        }
        if indices.len() < 2 {
            warnings.push(format!("bucket {bucket}: skipped (needs at least 2 examples)"));
            continue;
        }
        let sets = collect_representations(teacher, student, student_channel, task, &indices)?;
        grids.push(grid_from_sets(bucket, &sets)?);
    }
    Ok((grids, warnings))
}

/// Root mean squared error.
pub fn rmse(preds: &[f32], targets: &[f32]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "rmse needs equal non-empty inputs, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let sq: f64 = preds
        .iter()
        .zip(targets.iter())
        .map(|(p, t)| (*p as f64 - *t as f64).powi(2))
        .sum();
    Ok((sq / preds.len() as f64).sqrt())
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &[f32], classes: usize, labels: &[usize]) -> Result<f64> {
    if classes == 0 || labels.is_empty() || logits.len() != classes * labels.len() {
        return Err(Error::Shape(format!(
            "accuracy needs logits of {} x {classes}, got {}",
            labels.len(),
            logits.len()
        )));
    }
    let mut hits = 0usize;
    for (r, label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if argmax == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}
