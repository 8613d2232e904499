//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations record nodes in forward order; `backward` replays them in
//! exact reverse order, so gradient accumulation order is deterministic and
//! a fixed seed reproduces every buffer bit-for-bit. Parameters are
//! snapshotted when first bound to a tape and deduplicated by tensor id, so
//! a module applied several times in one step accumulates into a single
//! gradient buffer.
//!
//! Reductions (mse, layer-norm statistics, bias sums, matmul inner products)
//! accumulate in f64 before rounding to f32, which keeps analytic gradients
//! well inside finite-difference tolerance.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Train enables dropout; Eval makes every op a deterministic function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// c[B,O] = a[B,I] · b[I,O]
    MatMul { a: Var, b: Var },
    /// y[B,O] = x[B,O] + bias[O] broadcast over rows
    AddBias { x: Var, bias: Var },
    /// y = a + b, same shape
    Add { a: Var, b: Var },
    /// y = c * x
    Scale { x: Var, c: f32 },
    Relu { x: Var },
    /// Normalize over the last axis, then scale and shift.
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    /// Inverted dropout; mask entries are 0 or 1/keep.
    Dropout { x: Var, mask: Vec<f32> },
    /// Concat along the last axis.
    Concat { parts: Vec<Var> },
    /// Columns [start, start+len) of x.
    SliceCols { x: Var, start: usize, len: usize },
    /// Row r = mean of table rows ids[r]; empty id list gives a zero row.
    EmbedMean { table: Var, ids: Vec<Vec<u32>> },
    /// Scalar mean of squared differences over all elements.
    Mse { a: Var, b: Var },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    /// tensor id -> bound var, for parameter deduplication and grad export.
    params: HashMap<u64, Var>,
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensor rank must be >= 1")
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, shape, data, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input (batch data, noise draws, targets).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        if crate::tensor::numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "constant data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    /// Bind a parameter tensor. The value is snapshotted; binding the same
    /// tensor again returns the existing var. Tensors with
    /// `requires_grad == false` become constants (frozen models).
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let v = self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad);
        self.params.insert(t.id(), v);
        v
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f32 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1, "scalar() on non-scalar var");
        self.nodes[v.0].data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Operations ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul expects [B,I]·[I,O], got {:?} · {:?}",
                sa, sb
            )));
        }
        let (bsz, inner, out) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0f32; bsz * out];
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            let mut acc = vec![0.0f64; out];
            for i in 0..bsz {
                acc.iter_mut().for_each(|x| *x = 0.0);
                for k in 0..inner {
                    let aik = av[i * inner + k] as f64;
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * out..(k + 1) * out];
                    for (j, bj) in brow.iter().enumerate() {
                        acc[j] += aik * *bj as f64;
                    }
                }
                for j in 0..out {
                    c[i * out + j] = acc[j] as f32;
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, vec![bsz, out], c, ng))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || last_dim(sx) != sb[0] {
            return Err(Error::Shape(format!(
                "add_bias expects x[..,D] + bias[D], got {:?} + {:?}",
                sx, sb
            )));
        }
        let d = sb[0];
        let rows = rows_of(sx);
        let mut y = self.nodes[x.0].data.clone();
        {
            let bv = &self.nodes[bias.0].data;
            for r in 0..rows {
                for j in 0..d {
                    y[r * d + j] += bv[j];
                }
            }
        }
        let shape = sx.to_vec();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBias { x, bias }, shape, y, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add expects equal shapes, got {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let y: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, z)| x + z)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, shape, y, ng))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let y: Vec<f32> = self.nodes[x.0].data.iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(Op::Scale { x, c }, shape, y, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y: Vec<f32> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(Op::Relu { x }, shape, y, ng)
    }

    /// Layer norm over the last axis with learned scale and shift.
    /// Variance uses the biased estimator and is guarded by eps = 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let d = last_dim(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm over {:?} needs gamma/beta of [{}], got {:?} and {:?}",
                self.shape(x),
                d,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = rows_of(self.shape(x));
        let mut y = vec![0.0f32; rows * d];
        let mut means = vec![0.0f64; rows];
        let mut rstds = vec![0.0f64; rows];
        {
            let xv = &self.nodes[x.0].data;
            let gv = &self.nodes[gamma.0].data;
            let bv = &self.nodes[beta.0].data;
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().map(|v| *v as f64).sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + EPS).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                for j in 0..d {
                    let xhat = (row[j] as f64 - mean) * rstd;
                    y[r * d + j] = (xhat * gv[j] as f64 + bv[j] as f64) as f32;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }, shape, y, ng))
    }

    /// Inverted dropout. Identity (no node, no rng draw) when rate == 0 or in
    /// eval mode. Rates outside [0, 1) are a configuration error.
    pub fn dropout(&mut self, x: Var, rate: f32, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if rate == 0.0 || mode == Mode::Eval {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let n = self.nodes[x.0].data.len();
        let mask: Vec<f32> =
            (0..n).map(|_| if rng.next_f32() < keep { inv } else { 0.0 }).collect();
        let y: Vec<f32> =
            self.nodes[x.0].data.iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Op::Dropout { x, mask }, shape, y, ng))
    }

    /// Concatenate along the last axis. All parts must agree on leading dims.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let rows = rows_of(self.shape(parts[0]));
        let mut total = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp[..sp.len() - 1] != lead[..] {
                return Err(Error::Shape(format!(
                    "concat parts disagree on leading dims: {:?} vs {:?}",
                    self.shape(parts[0]),
                    sp
                )));
            }
            total += last_dim(sp);
        }
        let mut y = vec![0.0f32; rows * total];
        let mut offset = 0usize;
        for &p in parts {
            let d = last_dim(self.shape(p));
            let pv = &self.nodes[p.0].data;
            for r in 0..rows {
                y[r * total + offset..r * total + offset + d]
                    .copy_from_slice(&pv[r * d..(r + 1) * d]);
            }
            offset += d;
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, shape, y, ng))
    }

    /// Columns [start, start+len) along the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if start + len > d {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) out of range for last dim {d}",
                start + len
            )));
        }
        let rows = rows_of(self.shape(x));
        let mut y = vec![0.0f32; rows * len];
        {
            let xv = &self.nodes[x.0].data;
            for r in 0..rows {
                y[r * len..(r + 1) * len]
                    .copy_from_slice(&xv[r * d + start..r * d + start + len]);
            }
        }
        let mut shape = self.shape(x)[..self.shape(x).len() - 1].to_vec();
        shape.push(len);
        let ng = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, shape, y, ng))
    }

    /// Mean-pool embedding lookup: output row r is the mean of `table` rows
    /// `ids[r]`; an empty id list yields a zero row.
    pub fn embed_mean(&mut self, table: Var, ids: &[Vec<u32>]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::Shape(format!("embed table must be [V,D], got {:?}", st)));
        }
        let (vocab, dim) = (st[0], st[1]);
        let bsz = ids.len();
        let mut y = vec![0.0f32; bsz * dim];
        {
            let tv = &self.nodes[table.0].data;
            for (r, row_ids) in ids.iter().enumerate() {
                if row_ids.is_empty() {
                    continue;
                }
                let mut acc = vec![0.0f64; dim];
                for &id in row_ids {
                    let id = id as usize;
                    if id >= vocab {
                        return Err(Error::Shape(format!(
                            "embedding id {id} out of range for table [{vocab},{dim}]"
                        )));
                    }
                    for j in 0..dim {
                        acc[j] += tv[id * dim + j] as f64;
                    }
                }
                let inv = 1.0 / row_ids.len() as f64;
                for j in 0..dim {
                    y[r * dim + j] = (acc[j] * inv) as f32;
                }
            }
        }
        let ng = self.needs(table);
        Ok(self.push(Op::EmbedMean { table, ids: ids.to_vec() }, vec![bsz, dim], y, ng))
    }

    /// Mean over all elements of (a - b)^2, as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mse expects equal shapes, got {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = self.nodes[a.0].data.len();
        let sum: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum();
        let v = (sum / n as f64) as f32;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mse { a, b }, vec![1], vec![v], ng))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Nodes that cannot influence any
    /// parameter are skipped; accumulation order is the exact reverse of
    /// the recorded forward order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].data[0].is_finite() {
            return Err(Error::Numerical(format!(
                "loss is not finite: {}",
                self.nodes[loss.0].data[0]
            )));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = self.grads[idx].take() else { continue };
            self.backward_node(idx, &dy);
            self.grads[idx] = Some(dy);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contribution: &[f32]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution.iter()) {
                    *gi += ci;
                }
            }
            None => {
                self.grads[v.0] = Some(contribution.to_vec());
            }
        }
    }

    fn backward_node(&mut self, idx: usize, dy: &[f32]) {
        // Ops are read out first so `accum` can borrow self mutably.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (bsz, inner, out) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    // dA = dC · B^T
                    let bv = &self.nodes[b.0].data;
                    let mut da = vec![0.0f32; bsz * inner];
                    for i in 0..bsz {
                        for k in 0..inner {
                            let mut acc = 0.0f64;
                            let drow = &dy[i * out..(i + 1) * out];
                            let brow = &bv[k * out..(k + 1) * out];
                            for j in 0..out {
                                acc += drow[j] as f64 * brow[j] as f64;
                            }
                            da[i * inner + k] = acc as f32;
                        }
                    }
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    // dB = A^T · dC
                    let av = &self.nodes[a.0].data;
                    let mut db = vec![0.0f64; inner * out];
                    for i in 0..bsz {
                        for k in 0..inner {
                            let aik = av[i * inner + k] as f64;
                            if aik == 0.0 {
                                continue;
                            }
                            let drow = &dy[i * out..(i + 1) * out];
                            for j in 0..out {
                                db[k * out + j] += aik * drow[j] as f64;
                            }
                        }
                    }
                    let db32: Vec<f32> = db.iter().map(|v| *v as f32).collect();
                    self.accum(b, &db32);
                }
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let d = last_dim(&self.nodes[bias.0].shape);
                let rows = dy.len() / d;
                if self.needs(x) {
                    self.accum(x, dy);
                }
                if self.needs(bias) {
                    let mut db = vec![0.0f64; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += dy[r * d + j] as f64;
                        }
                    }
                    let db32: Vec<f32> = db.iter().map(|v| *v as f32).collect();
                    self.accum(bias, &db32);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, dy);
                self.accum(b, dy);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dx: Vec<f32> = dy.iter().map(|v| c * v).collect();
                self.accum(x, &dx);
            }
            Op::Relu { x } => {
                let x = *x;
                let dx: Vec<f32> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(dy.iter())
                    .map(|(xi, di)| if *xi > 0.0 { *di } else { 0.0 })
                    .collect();
                self.accum(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = last_dim(&self.nodes[x.0].shape);
                let rows = dy.len() / d;
                let mean = mean.clone();
                let rstd = rstd.clone();
                let xv = self.nodes[x.0].data.clone();
                let gv = self.nodes[gamma.0].data.clone();

                if self.needs(gamma) || self.needs(beta) {
                    let mut dg = vec![0.0f64; d];
                    let mut db = vec![0.0f64; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let xhat = (xv[r * d + j] as f64 - mean[r]) * rstd[r];
                            dg[j] += dy[r * d + j] as f64 * xhat;
                            db[j] += dy[r * d + j] as f64;
                        }
                    }
                    let dg32: Vec<f32> = dg.iter().map(|v| *v as f32).collect();
                    let db32: Vec<f32> = db.iter().map(|v| *v as f32).collect();
                    self.accum(gamma, &dg32);
                    self.accum(beta, &db32);
                }
                if self.needs(x) {
                    let mut dx = vec![0.0f32; rows * d];
                    for r in 0..rows {
                        let mut g_mean = 0.0f64;
                        let mut gx_mean = 0.0f64;
                        for j in 0..d {
                            let xhat = (xv[r * d + j] as f64 - mean[r]) * rstd[r];
                            let g = dy[r * d + j] as f64 * gv[j] as f64;
                            g_mean += g;
                            gx_mean += g * xhat;
                        }
                        g_mean /= d as f64;
                        gx_mean /= d as f64;
                        for j in 0..d {
                            let xhat = (xv[r * d + j] as f64 - mean[r]) * rstd[r];
                            let g = dy[r * d + j] as f64 * gv[j] as f64;
                            dx[r * d + j] = (rstd[r] * (g - g_mean - xhat * gx_mean)) as f32;
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let dx: Vec<f32> = mask.iter().zip(dy.iter()).map(|(m, d)| m * d).collect();
                self.accum(x, &dx);
            }
            Op::Concat { parts } => {
                let parts = parts.clone();
                let total = last_dim(&self.nodes[idx].shape);
                let rows = dy.len() / total;
                let mut offset = 0usize;
                for p in parts {
                    let d = last_dim(&self.nodes[p.0].shape);
                    if self.needs(p) {
                        let mut dp = vec![0.0f32; rows * d];
                        for r in 0..rows {
                            dp[r * d..(r + 1) * d].copy_from_slice(
                                &dy[r * total + offset..r * total + offset + d],
                            );
                        }
                        self.accum(p, &dp);
                    }
                    offset += d;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let d = last_dim(&self.nodes[x.0].shape);
                let rows = dy.len() / len;
                let mut dx = vec![0.0f32; rows * d];
                for r in 0..rows {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                self.accum(x, &dx);
            }
            Op::EmbedMean { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let dim = last_dim(&self.nodes[idx].shape);
                let vocab = self.nodes[table.0].shape[0];
                let mut dt = vec![0.0f32; vocab * dim];
                for (r, row_ids) in ids.iter().enumerate() {
                    if row_ids.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / row_ids.len() as f32;
                    for &id in row_ids {
                        let id = id as usize;
                        for j in 0..dim {
                            dt[id * dim + j] += dy[r * dim + j] * inv;
                        }
                    }
                }
                self.accum(table, &dt);
            }
            Op::Mse { a, b } => {
                let (a, b) = (*a, *b);
                let n = self.nodes[a.0].data.len();
                let scale = 2.0 * dy[0] / n as f32;
                let diff: Vec<f32> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(self.nodes[b.0].data.iter())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                if self.needs(a) {
                    self.accum(a, &diff);
                }
                if self.needs(b) {
                    let neg: Vec<f32> = diff.iter().map(|v| -v).collect();
                    self.accum(b, &neg);
                }
            }
        }
    }

    /// Accumulated gradient for a var, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for a bound parameter tensor. Zeros when the parameter was
    /// never bound or no gradient reached it.
    pub fn grad_of(&self, t: &Tensor) -> Vec<f32> {
        match self.params.get(&t.id()).and_then(|v| self.grads[v.0].clone()) {
            Some(g) => g,
            None => vec![0.0; t.numel()],
        }
    }

    /// Write gradients into each tensor's `grad` buffer (zeros when no
    /// gradient flowed). Must run after `backward`.
    pub fn export_grads(&self, tensors: &mut [&mut Tensor]) {
        for t in tensors.iter_mut() {
            let g = self.grad_of(t);
            t.grad = Some(g);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.data.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_unit_vector_selection() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = tape.constant(vec![2, 1], vec![2.0, 5.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn relu_sign_split() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![-1.0, 2.0]).unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 2.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero_before_shift() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 4], vec![3.0; 4]).unwrap();
        let g = tape.param(&t(&[4], &[1.0; 4]));
        let b = tape.param(&t(&[4], &[0.0; 4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for v in tape.value(y) {
            assert!(v.abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity_both_modes() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let before = tape.len();
        let y = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        let z = tape.dropout(x, 0.0, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
        assert_eq!(z, x);
        assert_eq!(tape.len(), before, "rate 0 must not record a node");
    }

    #[test]
    fn dropout_rate_one_is_config_error() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![1.0; 3]).unwrap();
        assert!(matches!(tape.dropout(x, 1.0, Mode::Train, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn mse_values() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let z = tape.mse(a, b).unwrap();
        assert_eq!(tape.scalar(z), 0.0);

        let c = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let d = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let m = tape.mse(c, d).unwrap();
        assert_eq!(tape.scalar(m), 12.5);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 1).unwrap();
        let back = tape.concat(&[left, right]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn embed_mean_empty_ids_is_zero_row() {
        let mut tape = Tape::new();
        let table = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let tv = tape.param(&table);
        let out = tape.embed_mean(tv, &[vec![0, 2], vec![]]).unwrap();
        assert_eq!(tape.value(out), &[3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero_grad() {
        let mut tape = Tape::new();
        let used = t(&[2], &[1.0, 2.0]);
        let unused = t(&[2], &[5.0, 5.0]);
        let u = tape.param(&used);
        let _v = tape.param(&unused);
        let target = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let loss = tape.mse(u, target).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(&unused), vec![0.0, 0.0]);
        assert!(tape.grad_of(&used).iter().any(|g| *g != 0.0));
    }

    #[test]
    fn param_rebinding_dedupes_and_accumulates() {
        // Using the same parameter twice must accumulate both contributions.
        let mut tape = Tape::new();
        let w = t(&[1], &[3.0]);
        let a = tape.param(&w);
        let b = tape.param(&w);
        assert_eq!(a, b);
        let doubled = tape.add(a, b).unwrap(); // f = 2w
        let target = tape.constant(vec![1], vec![0.0]).unwrap();
        let loss = tape.mse(doubled, target).unwrap(); // (2w)^2
        tape.backward(loss).unwrap();
        // d/dw (2w)^2 = 8w = 24
        let g = tape.grad_of(&w);
        assert!((g[0] - 24.0).abs() < 1e-4, "{g:?}");
    }

    #[test]
    fn backward_rejects_nonscalar_and_nonfinite() {
        let mut tape = Tape::new();
        let p = t(&[2], &[1.0, 2.0]);
        let v = tape.param(&p);
        assert!(matches!(tape.backward(v), Err(Error::Shape(_))));

        let mut tape2 = Tape::new();
        let bad = tape2.constant(vec![1], vec![f32::NAN]).unwrap();
        assert!(matches!(tape2.backward(bad), Err(Error::Numerical(_))));
    }

    #[test]
    fn fixed_seed_forward_backward_bit_identical() {
        let run = || {
            let mut rng = Rng::new(99);
            let mut tape = Tape::new();
            let w = t(&[4, 3], &(0..12).map(|i| (i as f32) / 7.0 - 0.6).collect::<Vec<_>>());
            let x = tape.constant(vec![2, 4], vec![0.3, -1.2, 0.8, 0.5, 1.1, -0.4, 0.2, -0.9]).unwrap();
            let wv = tape.param(&w);
            let h = tape.matmul(x, wv).unwrap();
            let h = tape.relu(h);
            let h = tape.dropout(h, 0.4, Mode::Train, &mut rng).unwrap();
            let target = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
            let loss = tape.mse(h, target).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(loss).to_vec(), tape.grad_of(&w))
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1[0].to_bits(), l2[0].to_bits());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
