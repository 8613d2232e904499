//! Feed-forward models with an explicit layer partition.
//!
//! A net of n dense layers is split into a lower block (layers 1..l) whose
//! output is the lower hidden state `s`, a middle block (layers l+1..h)
//! producing the higher hidden state `e`, and a head (layers h+1..n) mapping
//! `e` to predictions. Hidden layers are dense -> relu -> dropout; the last
//! layer is linear. Sparse inputs go through learned embedding tables that
//! are concatenated into a dense feature vector.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const USER_EMBED_DIM: usize = 100;
pub const MOVIE_EMBED_DIM: usize = 100;
pub const TITLE_EMBED_DIM: usize = 50;
pub const GENRE_EMBED_DIM: usize = 50;
/// Concatenated width of the four sparse-feature embeddings.
pub const SPARSE_INPUT_WIDTH: usize =
    USER_EMBED_DIM + MOVIE_EMBED_DIM + TITLE_EMBED_DIM + GENRE_EMBED_DIM;

/// 1-based indices of the last lower layer (l) and last higher layer (h)
/// within a net of `total` layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPartition {
    pub lower: usize,
    pub higher: usize,
    pub total: usize,
}

impl LayerPartition {
    pub fn new(lower: usize, higher: usize, total: usize) -> Result<Self> {
        if !(1 <= lower && lower < higher && higher <= total) {
            return Err(Error::Config(format!(
                "layer partition requires 1 <= l < h <= n, got l={lower} h={higher} n={total}"
            )));
        }
        Ok(LayerPartition { lower, higher, total })
    }
}

#[derive(Debug)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseLayer {
    pub fn new(in_width: usize, out_width: usize, rng: &mut Rng) -> Self {
        DenseLayer {
            w: Tensor::he_uniform(vec![in_width, out_width], in_width, rng),
            b: Tensor::zeros(vec![out_width]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.w.shape[0]
    }

    pub fn out_width(&self) -> usize {
        self.w.shape[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let z = tape.matmul(x, w)?;
        tape.add_bias(z, b)
    }
}

/// Batch of sparse features for the embedding front-end. Users and movies
/// are single ids; title tokens and genres are variable-length id lists.
#[derive(Debug, Clone, Default)]
pub struct SparseBatch {
    pub users: Vec<u32>,
    pub movies: Vec<u32>,
    pub title_tokens: Vec<Vec<u32>>,
    pub genres: Vec<Vec<u32>>,
}

impl SparseBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Vocabulary sizes for the four embedding tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub users: usize,
    pub movies: usize,
    pub title_vocab: usize,
    pub genres: usize,
}

/// Learned embedding tables for sparse inputs. Multi-token features are
/// mean-pooled; an empty token set pools to the zero vector.
#[derive(Debug)]
pub struct FeatureEncoder {
    pub user: Tensor,
    pub movie: Tensor,
    pub title: Tensor,
    pub genre: Tensor,
}

impl FeatureEncoder {
    pub fn new(dims: FeatureDims, rng: &mut Rng) -> Self {
        FeatureEncoder {
            user: Tensor::he_uniform(vec![dims.users, USER_EMBED_DIM], USER_EMBED_DIM, rng),
            movie: Tensor::he_uniform(vec![dims.movies, MOVIE_EMBED_DIM], MOVIE_EMBED_DIM, rng),
            title: Tensor::he_uniform(
                vec![dims.title_vocab.max(1), TITLE_EMBED_DIM],
                TITLE_EMBED_DIM,
                rng,
            ),
            genre: Tensor::he_uniform(vec![dims.genres, GENRE_EMBED_DIM], GENRE_EMBED_DIM, rng),
        }
    }

    pub fn embed(&self, tape: &mut Tape, batch: &SparseBatch) -> Result<Var> {
        let singleton = |ids: &[u32]| -> Vec<Vec<u32>> { ids.iter().map(|i| vec![*i]).collect() };
        let ut = tape.param(&self.user);
        let mt = tape.param(&self.movie);
        let tt = tape.param(&self.title);
        let gt = tape.param(&self.genre);
        let ue = tape.embed_mean(ut, &singleton(&batch.users))?;
        let me = tape.embed_mean(mt, &singleton(&batch.movies))?;
        let te = tape.embed_mean(tt, &batch.title_tokens)?;
        let ge = tape.embed_mean(gt, &batch.genres)?;
        tape.concat(&[ue, me, te, ge])
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.user, &self.movie, &self.title, &self.genre]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.user, &mut self.movie, &mut self.title, &mut self.genre]
    }
}

/// One batch of model input.
pub enum BatchInput<'a> {
    /// Row-major [batch, width] values.
    Dense { width: usize, values: &'a [f32] },
    Sparse(&'a SparseBatch),
}

impl BatchInput<'_> {
    pub fn batch_size(&self) -> usize {
        match self {
            BatchInput::Dense { width, values } => values.len() / width.max(&1),
            BatchInput::Sparse(b) => b.len(),
        }
    }
}

/// Lower state s, higher state e, and their concatenation {s; e}.
#[derive(Debug, Clone, Copy)]
pub struct HiddenStates {
    pub s: Var,
    pub e: Var,
    pub cat: Var,
}

#[derive(Debug, Clone)]
pub struct NetConfig {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub output_width: usize,
    pub dropout: f32,
    pub partition: LayerPartition,
}

impl NetConfig {
    /// Two relu layers plus a linear head, partitioned so the first hidden
    /// layer output is s and the second is e.
    pub fn two_layer(input_width: usize, h1: usize, h2: usize, output: usize, dropout: f32) -> Self {
        NetConfig {
            input_width,
            hidden: vec![h1, h2],
            output_width: output,
            dropout,
            partition: LayerPartition { lower: 1, higher: 2, total: 3 },
        }
    }
}

#[derive(Debug)]
pub struct PartitionedNet {
    layers: Vec<DenseLayer>,
    partition: LayerPartition,
    dropout: f32,
    features: Option<FeatureEncoder>,
    input_width: usize,
    frozen: bool,
}

impl PartitionedNet {
    pub fn new(cfg: &NetConfig, features: Option<FeatureEncoder>, rng: &mut Rng) -> Result<Self> {
        let total = cfg.hidden.len() + 1;
        let partition = LayerPartition::new(cfg.partition.lower, cfg.partition.higher, total)?;
        if partition != cfg.partition {
            return Err(Error::Config(format!(
                "partition {:?} does not match layer count {}",
                cfg.partition, total
            )));
        }
        if let Some(f) = &features {
            let fw = f.user.shape[1] + f.movie.shape[1] + f.title.shape[1] + f.genre.shape[1];
            if fw != cfg.input_width {
                return Err(Error::Config(format!(
                    "feature encoder width {} does not match net input width {}",
                    fw, cfg.input_width
                )));
            }
        }
        let mut layers = Vec::with_capacity(total);
        let mut in_w = cfg.input_width;
        for &h in &cfg.hidden {
            layers.push(DenseLayer::new(in_w, h, rng));
            in_w = h;
        }
        layers.push(DenseLayer::new(in_w, cfg.output_width, rng));
        Ok(PartitionedNet {
            layers,
            partition,
            dropout: cfg.dropout,
            features,
            input_width: cfg.input_width,
            frozen: false,
        })
    }

    pub fn partition(&self) -> LayerPartition {
        self.partition
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn s_width(&self) -> usize {
        self.layers[self.partition.lower - 1].out_width()
    }

    pub fn e_width(&self) -> usize {
        self.layers[self.partition.higher - 1].out_width()
    }

    pub fn state_width(&self) -> usize {
        self.s_width() + self.e_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().out_width()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn layer(&self, idx: usize) -> &DenseLayer {
        &self.layers[idx]
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut DenseLayer {
        &mut self.layers[idx]
    }

    /// Freeze or unfreeze every parameter, embedding tables included.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for t in self.params_mut() {
            t.requires_grad = !frozen;
        }
    }

    /// Dense layer with relu+dropout when it is not the final layer.
    fn apply_layer(
        &self,
        tape: &mut Tape,
        idx: usize,
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let z = self.layers[idx].forward(tape, x)?;
        if idx + 1 == self.layers.len() {
            return Ok(z);
        }
        let a = tape.relu(z);
        tape.dropout(a, self.dropout, mode, rng)
    }

    fn input_var(&self, tape: &mut Tape, input: &BatchInput, mode: Mode) -> Result<Var> {
        match input {
            BatchInput::Dense { width, values } => {
                if *width != self.input_width {
                    return Err(Error::Shape(format!(
                        "input width {} does not match net input width {}",
                        width, self.input_width
                    )));
                }
                let bsz = values.len() / width;
                tape.constant(vec![bsz, *width], values.to_vec())
            }
            BatchInput::Sparse(batch) => {
                let Some(features) = &self.features else {
                    return Err(Error::Shape(
                        "net has no feature encoder but got a sparse batch".into(),
                    ));
                };
                let _ = mode;
                features.embed(tape, batch)
            }
        }
    }

    /// Full forward pass returning predictions and tapped hidden states.
    /// Taps are the nodes the rest of the net consumed, not recomputations.
    pub fn forward_with_taps(
        &self,
        tape: &mut Tape,
        input: &BatchInput,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Var, HiddenStates)> {
        let mode = if self.frozen { Mode::Eval } else { mode };
        let mut cur = self.input_var(tape, input, mode)?;
        let mut s = None;
        let mut e = None;
        for idx in 0..self.layers.len() {
            cur = self.apply_layer(tape, idx, cur, mode, rng)?;
            if idx + 1 == self.partition.lower {
                s = Some(cur);
            }
            if idx + 1 == self.partition.higher {
                e = Some(cur);
            }
        }
        let (s, e) = (s.expect("partition checked"), e.expect("partition checked"));
        let cat = tape.concat(&[s, e])?;
        Ok((cur, HiddenStates { s, e, cat }))
    }

    /// Interpreting block: layers l+1..h applied to a lower state. Gradients
    /// flow to `s_in` even when the net is frozen.
    pub fn run_middle(&self, tape: &mut Tape, s_in: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let mode = if self.frozen { Mode::Eval } else { mode };
        let expect = self.s_width();
        let got = *tape.shape(s_in).last().unwrap();
        if got != expect {
            return Err(Error::Shape(format!(
                "run_middle input width {got} does not match lower-state width {expect}"
            )));
        }
        let mut cur = s_in;
        for idx in self.partition.lower..self.partition.higher {
            cur = self.apply_layer(tape, idx, cur, mode, rng)?;
        }
        Ok(cur)
    }

    /// Head: layers h+1..n applied to a higher state.
    pub fn run_head(&self, tape: &mut Tape, e_in: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let mode = if self.frozen { Mode::Eval } else { mode };
        let expect = self.e_width();
        let got = *tape.shape(e_in).last().unwrap();
        if got != expect {
            return Err(Error::Shape(format!(
                "run_head input width {got} does not match higher-state width {expect}"
            )));
        }
        let mut cur = e_in;
        for idx in self.partition.higher..self.layers.len() {
            cur = self.apply_layer(tape, idx, cur, mode, rng)?;
        }
        Ok(cur)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.layer{i}.w"), &layer.w));
            out.push((format!("{prefix}.layer{i}.b"), &layer.b));
        }
        if let Some(f) = &self.features {
            let [u, m, t, g] = f.tensors();
            out.push((format!("{prefix}.embed.user"), u));
            out.push((format!("{prefix}.embed.movie"), m));
            out.push((format!("{prefix}.embed.title"), t));
            out.push((format!("{prefix}.embed.genre"), g));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        if let Some(f) = &mut self.features {
            out.extend(f.tensors_mut());
        }
        out
    }

    /// Combined checksum over all parameters, for freeze verification.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0x9e3779b97f4a7c15;
        for (_, t) in self.named_params("net") {
            h ^= t.checksum();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn rng() -> Rng {
        Rng::new(7)
    }

    /// Identity-weight two-layer net: relu taps the raw input signs.
    #[test]
    fn identity_weights_tap_relu_of_input() {
        let cfg = NetConfig {
            input_width: 2,
            hidden: vec![2],
            output_width: 1,
            dropout: 0.0,
            partition: LayerPartition { lower: 1, higher: 2, total: 2 },
        };
        let mut r = rng();
        let mut net = PartitionedNet::new(&cfg, None, &mut r).unwrap();
        net.layer_mut(0).w.load_data(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        net.layer_mut(0).b.load_data(&[0.0, 0.0]).unwrap();

        let mut tape = Tape::new();
        let input = BatchInput::Dense { width: 2, values: &[1.0, -1.0] };
        let (_, hs) = net.forward_with_taps(&mut tape, &input, Mode::Eval, &mut r).unwrap();
        assert_eq!(tape.value(hs.s), &[1.0, 0.0]);
    }

    #[test]
    fn movielens_shapes_teacher_and_student() {
        let mut r = rng();
        let dims = FeatureDims { users: 10, movies: 12, title_vocab: 20, genres: 19 };
        let teacher_cfg = NetConfig::two_layer(SPARSE_INPUT_WIDTH, 512, 256, 1, 0.0);
        let teacher =
            PartitionedNet::new(&teacher_cfg, Some(FeatureEncoder::new(dims, &mut r)), &mut r)
                .unwrap();
        assert_eq!((teacher.s_width(), teacher.e_width()), (512, 256));

        let student_cfg = NetConfig::two_layer(SPARSE_INPUT_WIDTH, 128, 64, 1, 0.0);
        let student =
            PartitionedNet::new(&student_cfg, Some(FeatureEncoder::new(dims, &mut r)), &mut r)
                .unwrap();
        assert_eq!((student.s_width(), student.e_width()), (128, 64));
        // Student hidden widths are exactly 1/4 of the teacher's.
        assert_eq!(student.s_width() * 4, teacher.s_width());
        assert_eq!(student.e_width() * 4, teacher.e_width());

        let batch = SparseBatch {
            users: vec![0, 3],
            movies: vec![1, 2],
            title_tokens: vec![vec![0, 5], vec![]],
            genres: vec![vec![4], vec![7, 8]],
        };
        let mut tape = Tape::new();
        let (y, hs) =
            teacher.forward_with_taps(&mut tape, &BatchInput::Sparse(&batch), Mode::Eval, &mut r).unwrap();
        assert_eq!(tape.shape(hs.s), &[2, 512]);
        assert_eq!(tape.shape(hs.e), &[2, 256]);
        assert_eq!(tape.shape(hs.cat), &[2, 768]);
        assert_eq!(tape.shape(y), &[2, 1]);
    }

    #[test]
    fn taps_match_recomputation_through_middle_and_head() {
        let cfg = NetConfig::two_layer(4, 6, 3, 1, 0.0);
        let mut r = rng();
        let net = PartitionedNet::new(&cfg, None, &mut r).unwrap();
        let values: Vec<f32> = (0..8).map(|i| (i as f32) * 0.25 - 1.0).collect();
        let input = BatchInput::Dense { width: 4, values: &values };

        let mut tape = Tape::new();
        let (y, hs) = net.forward_with_taps(&mut tape, &input, Mode::Eval, &mut r).unwrap();
        let e2 = net.run_middle(&mut tape, hs.s, Mode::Eval, &mut r).unwrap();
        let y2 = net.run_head(&mut tape, e2, Mode::Eval, &mut r).unwrap();
        assert_eq!(tape.value(hs.e), tape.value(e2));
        assert_eq!(tape.value(y), tape.value(y2));
    }

    #[test]
    fn zero_weight_middle_outputs_relu_of_bias() {
        let cfg = NetConfig::two_layer(3, 4, 2, 1, 0.0);
        let mut r = rng();
        let mut net = PartitionedNet::new(&cfg, None, &mut r).unwrap();
        net.layer_mut(1).w.load_data(&[0.0; 8]).unwrap();
        net.layer_mut(1).b.load_data(&[0.5, -0.5]).unwrap();

        let mut tape = Tape::new();
        let s = tape.constant(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = net.run_middle(&mut tape, s, Mode::Eval, &mut r).unwrap();
        assert_eq!(tape.value(e), &[0.5, 0.0]);
    }

    #[test]
    fn linear_head_values() {
        let cfg = NetConfig {
            input_width: 1,
            hidden: vec![1, 1],
            output_width: 1,
            dropout: 0.0,
            partition: LayerPartition { lower: 1, higher: 2, total: 3 },
        };
        let mut r = rng();
        let mut net = PartitionedNet::new(&cfg, None, &mut r).unwrap();
        net.layer_mut(2).w.load_data(&[2.0]).unwrap();
        net.layer_mut(2).b.load_data(&[1.0]).unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(vec![1, 1], vec![3.0]).unwrap();
        let y = net.run_head(&mut tape, e, Mode::Eval, &mut r).unwrap();
        assert_eq!(tape.value(y), &[7.0]);
    }

    #[test]
    fn width_mismatch_errors() {
        let cfg = NetConfig::two_layer(4, 6, 3, 1, 0.0);
        let mut r = rng();
        let net = PartitionedNet::new(&cfg, None, &mut r).unwrap();
        let mut tape = Tape::new();
        let bad = BatchInput::Dense { width: 5, values: &[0.0; 5] };
        assert!(matches!(
            net.forward_with_taps(&mut tape, &bad, Mode::Eval, &mut r),
            Err(Error::Shape(_))
        ));
        let s_bad = tape.constant(vec![1, 7], vec![0.0; 7]).unwrap();
        assert!(matches!(net.run_middle(&mut tape, s_bad, Mode::Eval, &mut r), Err(Error::Shape(_))));
        assert!(matches!(net.run_head(&mut tape, s_bad, Mode::Eval, &mut r), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_partition_rejected() {
        assert!(LayerPartition::new(0, 2, 3).is_err());
        assert!(LayerPartition::new(2, 2, 3).is_err());
        assert!(LayerPartition::new(1, 4, 3).is_err());
        assert!(LayerPartition::new(1, 2, 3).is_ok());
    }

    /// Gradient of a scalar of run_middle's output w.r.t. the decoded lower
    /// state, with the net frozen, matches finite differences.
    #[test]
    fn frozen_middle_gradient_flows_to_input() {
        let cfg = NetConfig::two_layer(3, 4, 2, 1, 0.0);
        let mut r = rng();
        let mut net = PartitionedNet::new(&cfg, None, &mut r).unwrap();
        // Pin the middle block so every relu preactivation keeps a margin
        // larger than the finite-difference ball.
        net.layer_mut(1)
            .w
            .load_data(&[0.5, -0.4, 0.3, 0.6, -0.2, 0.5, 0.4, -0.3])
            .unwrap();
        net.layer_mut(1).b.load_data(&[0.7, -0.6]).unwrap();
        net.set_frozen(true);

        let s_in = Tensor::from_vec(vec![2, 4], vec![0.4, -0.3, 0.8, 0.2, -0.5, 0.6, 0.1, -0.2])
            .unwrap();
        let err = gradcheck::max_rel_error(
            |tape, vars| {
                let mut r2 = Rng::new(0);
                let e = net.run_middle(tape, vars[0], Mode::Eval, &mut r2)?;
                let target = tape.constant(vec![2, 2], vec![0.0; 4])?;
                tape.mse(e, target)
            },
            &[&s_in],
            gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
        // And the frozen weights themselves receive no gradient.
        let mut tape = Tape::new();
        let sv = tape.param(&s_in);
        let e = net.run_middle(&mut tape, sv, Mode::Eval, &mut rng()).unwrap();
        let target = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let loss = tape.mse(e, target).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad_of(&net.layer(1).w).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let cfg = NetConfig::two_layer(3, 4, 2, 1, 0.0);
        let mut r = rng();
        let net = PartitionedNet::new(&cfg, None, &mut r).unwrap();
        let e_in = Tensor::from_vec(vec![2, 2], vec![0.4, -0.3, 0.7, 0.2]).unwrap();
        let err = gradcheck::max_rel_error(
            |tape, vars| {
                let mut r2 = Rng::new(0);
                let y = net.run_head(tape, vars[0], Mode::Eval, &mut r2)?;
                let target = tape.constant(vec![2, 1], vec![0.0, 0.0])?;
                tape.mse(y, target)
            },
            &[&e_in],
            gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn empty_title_tokens_pool_to_zero() {
        let mut r = rng();
        let dims = FeatureDims { users: 4, movies: 4, title_vocab: 6, genres: 19 };
        let enc = FeatureEncoder::new(dims, &mut r);
        let batch = SparseBatch {
            users: vec![0],
            movies: vec![0],
            title_tokens: vec![vec![]],
            genres: vec![vec![0]],
        };
        let mut tape = Tape::new();
        let x = enc.embed(&mut tape, &batch).unwrap();
        let title_part = &tape.value(x)[USER_EMBED_DIM + MOVIE_EMBED_DIM
            ..USER_EMBED_DIM + MOVIE_EMBED_DIM + TITLE_EMBED_DIM];
        assert!(title_part.iter().all(|v| *v == 0.0));
        assert_eq!(tape.shape(x), &[1, SPARSE_INPUT_WIDTH]);
    }
}
