//! Training engine: the interactive-communication step, the four one-way
//! distillation baselines, and the mini-batch training loop.
//!
//! One step of the interactive method:
//!   (a) student forward on x -> (y_g, {s_g; e_g}), message m_g^0
//!   (b) teacher forward on x (eval, detached) -> m_h^0
//!   (c) ground truth + w2 * L_MC + w3 * L_SC on the iteration-0 messages
//!   (d) for i in 0..=k: teacher decodes m_g^i, optionally noised s_h',
//!       interprets through its middle block, encodes the reply m_h^{i+1};
//!       student decodes, accumulates w1 * L_interact against its current
//!       states, interprets, and re-encodes m_g^{i+1} for the next round
//!   (e) one optimizer step on the student body plus all channel parameters
//!
//! Zero-weight terms are excised from the graph entirely, so a run with
//! every extra weight at zero is bit-identical to training from scratch.

use std::time::Instant;

use crate::comm::{self, ChannelConfig, CommChannel};
use crate::data::{OwnedBatch, TaskData};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossWeights};
use crate::metrics::MetricRow;
use crate::nets::{FeatureEncoder, HiddenStates, NetConfig, PartitionedNet};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Scratch,
    Ld,
    Fd,
    FitNet,
    Hybrid,
    Td,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "scratch" => Ok(Method::Scratch),
            "ld" => Ok(Method::Ld),
            "fd" => Ok(Method::Fd),
            "fitnet" => Ok(Method::FitNet),
            "hybrid" => Ok(Method::Hybrid),
            "td" => Ok(Method::Td),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected scratch|ld|fd|fitnet|hybrid|td)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Scratch => "scratch",
            Method::Ld => "ld",
            Method::Fd => "fd",
            Method::FitNet => "fitnet",
            Method::Hybrid => "hybrid",
            Method::Td => "td",
        }
    }
}

/// Optional schedule: train the student alone, then only the channels with
/// the student frozen, then everything jointly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RampUp {
    pub student_steps: usize,
    pub channel_steps: usize,
}

pub const MAX_ITERATIONS: usize = 3;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    /// Communication iterations k; the loop runs k+1 rounds.
    pub iterations: usize,
    pub weights: LossWeights,
    /// Gaussian noise on the teacher-decoded lower state, when set.
    pub noise_sigma: Option<f32>,
    pub ramp_up: Option<RampUp>,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.method == Method::Td && self.iterations > MAX_ITERATIONS {
            return Err(Error::Config(format!(
                "iterations k={} exceeds the supported maximum {MAX_ITERATIONS}",
                self.iterations
            )));
        }
        if let Some(sigma) = self.noise_sigma {
            if sigma < 0.0 {
                return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Per-iteration tensors of one interactive step, for debugging and
/// analysis. Holds exactly k+1 records: consumed student messages
/// m_g^0..m_g^k and teacher replies m_h^1..m_h^{k+1}.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub message_out: Vec<f32>,
    pub teacher_decoded_s: Vec<f32>,
    pub teacher_decoded_e: Vec<f32>,
    pub teacher_interpreted: Vec<f32>,
    pub message_back: Vec<f32>,
    pub student_decoded_s: Vec<f32>,
    pub student_decoded_e: Vec<f32>,
    pub student_interpreted: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct StepTrace {
    pub iterations: Vec<IterationRecord>,
}

/// Independent RNG streams so that excising a component leaves every other
/// stream untouched (a zero-weight run stays bit-identical to the run
/// without the component).
#[derive(Debug)]
pub struct StepRngs {
    pub data: Rng,
    pub student_drop: Rng,
    pub channel_drop: Rng,
    pub noise: Rng,
}

impl StepRngs {
    pub fn derive(seed: u64) -> Self {
        StepRngs {
            data: Rng::derive(seed, "data"),
            student_drop: Rng::derive(seed, "dropout.student"),
            channel_drop: Rng::derive(seed, "dropout.channels"),
            noise: Rng::derive(seed, "noise"),
        }
    }
}

pub struct DistillModels<'a> {
    pub teacher: Option<&'a PartitionedNet>,
    pub student: &'a PartitionedNet,
    pub student_channel: &'a CommChannel,
    pub teacher_channel: &'a CommChannel,
}

impl DistillModels<'_> {
    fn teacher(&self) -> Result<&PartitionedNet> {
        let teacher = self
            .teacher
            .ok_or_else(|| Error::Shape("method requires a teacher model".into()))?;
        if !teacher.is_frozen() {
            return Err(Error::Shape("teacher must be frozen during distillation".into()));
        }
        Ok(teacher)
    }
}

fn gt_loss(tape: &mut Tape, y: Var, targets: &[f32]) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let tv = tape.constant(shape, targets.to_vec())?;
    tape.mse(y, tv)
}

/// One interactive-communication step. Returns the total-loss var (for the
/// caller to run backward on), the per-term report, and optionally the full
/// iteration trace.
pub fn td_step(
    tape: &mut Tape,
    models: &DistillModels,
    batch: &OwnedBatch,
    cfg: &TrainConfig,
    rngs: &mut StepRngs,
    want_trace: bool,
) -> Result<(Var, LossReport, Option<StepTrace>)> {
    let w = &cfg.weights;
    let k = cfg.iterations;
    let input = batch.input.as_input();

    let (y_g, st_g) =
        models.student.forward_with_taps(tape, &input, Mode::Train, &mut rngs.student_drop)?;
    let gt = gt_loss(tape, y_g, &batch.targets)?;

    let need_loop = w.interact > 0.0;
    let need_mc = w.mc > 0.0;
    let need_sc = w.sc > 0.0;
    let need_m_g0 = need_loop || need_mc || need_sc;
    let need_teacher_fwd = need_mc || need_sc;

    let m_g0 = if need_m_g0 {
        Some(models.student_channel.encode(tape, &st_g, Mode::Train, &mut rngs.channel_drop)?)
    } else {
        None
    };

    let (st_h, m_h0) = if need_teacher_fwd {
        let teacher = models.teacher()?;
        let (_, st_h) =
            teacher.forward_with_taps(tape, &input, Mode::Eval, &mut rngs.student_drop)?;
        let m_h0 =
            models.teacher_channel.encode(tape, &st_h, Mode::Train, &mut rngs.channel_drop)?;
        (Some(st_h), Some(m_h0))
    } else {
        (None, None)
    };

    let mc = if need_mc { Some(losses::l_mc(tape, m_g0.unwrap(), m_h0.unwrap())?) } else { None };
    let sc = if need_sc {
        Some(losses::l_sc(
            tape,
            &st_g,
            st_h.as_ref().unwrap(),
            m_g0.unwrap(),
            m_h0.unwrap(),
            models.student_channel,
            models.teacher_channel,
            Mode::Train,
            &mut rngs.channel_drop,
        )?)
    } else {
        None
    };

    let mut interact_terms: Vec<Var> = Vec::new();
    let mut trace = want_trace.then(StepTrace::default);
    if need_loop {
        let teacher = models.teacher()?;
        let mut current = st_g;
        let mut m_g_i = m_g0.unwrap();
        for i in 0..=k {
            let dec_h =
                models.teacher_channel.decode(tape, m_g_i, Mode::Train, &mut rngs.channel_drop)?;
            let s_h_prime = match cfg.noise_sigma {
                Some(sigma) => comm::add_noise(tape, dec_h.s, sigma, &mut rngs.noise)?,
                None => dec_h.s,
            };
            let e_h_interp = teacher.run_middle(tape, s_h_prime, Mode::Eval, &mut rngs.student_drop)?;
            let reply_cat = tape.concat(&[s_h_prime, e_h_interp])?;
            let reply = HiddenStates { s: s_h_prime, e: e_h_interp, cat: reply_cat };
            let m_h_next =
                models.teacher_channel.encode(tape, &reply, Mode::Train, &mut rngs.channel_drop)?;
            let dec_g =
                models.student_channel.decode(tape, m_h_next, Mode::Train, &mut rngs.channel_drop)?;
            interact_terms.push(losses::l_interact(tape, current.cat, dec_g.cat)?);
            let e_g_interp =
                models.student.run_middle(tape, dec_g.s, Mode::Train, &mut rngs.student_drop)?;
            let next_cat = tape.concat(&[dec_g.s, e_g_interp])?;
            if let Some(trace) = trace.as_mut() {
                trace.iterations.push(IterationRecord {
                    message_out: tape.value(m_g_i).to_vec(),
                    teacher_decoded_s: tape.value(s_h_prime).to_vec(),
                    teacher_decoded_e: tape.value(dec_h.e).to_vec(),
                    teacher_interpreted: tape.value(e_h_interp).to_vec(),
                    message_back: tape.value(m_h_next).to_vec(),
                    student_decoded_s: tape.value(dec_g.s).to_vec(),
                    student_decoded_e: tape.value(dec_g.e).to_vec(),
                    student_interpreted: tape.value(e_g_interp).to_vec(),
                });
            }
            current = HiddenStates { s: dec_g.s, e: e_g_interp, cat: next_cat };
            if i < k {
                m_g_i = models
                    .student_channel
                    .encode(tape, &current, Mode::Train, &mut rngs.channel_drop)?;
            }
        }
    }

    let (total, report) = losses::combined_loss(tape, gt, &interact_terms, mc, sc, w)?;
    Ok((total, report, trace))
}

/// One step of a one-way baseline (ld, fd, fitnet, or hybrid).
pub fn baseline_step(
    tape: &mut Tape,
    models: &DistillModels,
    batch: &OwnedBatch,
    cfg: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<(Var, LossReport)> {
    let w = &cfg.weights;
    let input = batch.input.as_input();
    let (y_g, st_g) =
        models.student.forward_with_taps(tape, &input, Mode::Train, &mut rngs.student_drop)?;
    let gt = gt_loss(tape, y_g, &batch.targets)?;
    let mut report = LossReport { gt: tape.scalar(gt), ..LossReport::default() };
    let mut total = gt;

    // (weight, is_logit_side) pairs active for this method.
    let (logit_w, feature_w, fitnet_w) = match cfg.method {
        Method::Ld => (w.logit, 0.0, 0.0),
        Method::Fd => (0.0, w.feature, 0.0),
        Method::FitNet => (0.0, 0.0, w.fitnet),
        Method::Hybrid => (w.hybrid_logit, w.hybrid_feature, 0.0),
        other => {
            return Err(Error::Shape(format!(
                "baseline_step does not handle method '{}'",
                other.as_str()
            )))
        }
    };

    let need_teacher = logit_w > 0.0 || feature_w > 0.0 || fitnet_w > 0.0;
    if need_teacher {
        let teacher = models.teacher()?;
        let (y_h, st_h) =
            teacher.forward_with_taps(tape, &input, Mode::Eval, &mut rngs.student_drop)?;
        if logit_w > 0.0 {
            let term = losses::l_logit(tape, y_g, y_h)?;
            report.logit_raw = tape.scalar(term);
            let scaled = tape.scale(term, logit_w);
            total = tape.add(total, scaled)?;
            report.col_interact += logit_w * report.logit_raw;
        }
        if feature_w > 0.0 {
            let m_g =
                models.student_channel.encode(tape, &st_g, Mode::Train, &mut rngs.channel_drop)?;
            let m_h =
                models.teacher_channel.encode(tape, &st_h, Mode::Train, &mut rngs.channel_drop)?;
            let term = losses::l_feature(tape, m_g, m_h)?;
            report.feature_raw = tape.scalar(term);
            let scaled = tape.scale(term, feature_w);
            total = tape.add(total, scaled)?;
            report.col_mc += feature_w * report.feature_raw;
        }
        if fitnet_w > 0.0 {
            let term = losses::l_fitnet(
                tape,
                &st_g,
                &st_h,
                models.student_channel,
                Mode::Train,
                &mut rngs.channel_drop,
            )?;
            report.fitnet_raw = tape.scalar(term);
            let scaled = tape.scale(term, fitnet_w);
            total = tape.add(total, scaled)?;
            report.col_interact += fitnet_w * report.fitnet_raw;
        }
    }
    report.total = tape.scalar(total);
    Ok((total, report))
}

/// Plain supervised step (train-from-scratch arm).
pub fn scratch_step(
    tape: &mut Tape,
    student: &PartitionedNet,
    batch: &OwnedBatch,
    rngs: &mut StepRngs,
) -> Result<(Var, LossReport)> {
    let input = batch.input.as_input();
    let (y_g, _) =
        student.forward_with_taps(tape, &input, Mode::Train, &mut rngs.student_drop)?;
    let gt = gt_loss(tape, y_g, &batch.targets)?;
    let report = LossReport {
        gt: tape.scalar(gt),
        total: tape.scalar(gt),
        ..LossReport::default()
    };
    Ok((gt, report))
}

/// RMSE over the full eval split, in eval mode, batched.
pub fn evaluate_rmse(net: &PartitionedNet, task: &TaskData, batch_size: usize) -> Result<f64> {
    let n = task.eval_len();
    if n == 0 {
        return Err(Error::Data("eval split is empty".into()));
    }
    let mut unused = Rng::new(0);
    let mut sq_sum = 0.0f64;
    let mut count = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let batch = task.eval_batch(start..end)?;
        let mut tape = Tape::new();
        let input = batch.input.as_input();
        let (y, _) = net.forward_with_taps(&mut tape, &input, Mode::Eval, &mut unused)?;
        for (pred, target) in tape.value(y).iter().zip(batch.targets.iter()) {
            let d = *pred as f64 - *target as f64;
            sq_sum += d * d;
        }
        count += batch.targets.len();
        start = end;
    }
    Ok((sq_sum / count as f64).sqrt())
}

/// Everything needed to build the trainable side of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub student_cfg: NetConfig,
    pub channel_hidden: usize,
    pub message_dim: usize,
    pub channel_dropout: f32,
}

/// Build the channel pair a method needs. Unused halves stay absent so a
/// scratch checkpoint carries no channel tensors.
pub fn build_channels(
    method: Method,
    setup: &ExperimentSetup,
    student: &PartitionedNet,
    teacher: Option<&PartitionedNet>,
    rng: &mut Rng,
) -> Result<(CommChannel, CommChannel)> {
    let student_cfg = ChannelConfig {
        s_width: student.s_width(),
        e_width: student.e_width(),
        hidden: setup.channel_hidden,
        message_dim: setup.message_dim,
        dropout: setup.channel_dropout,
    };
    let teacher_cfg = teacher.map(|t| ChannelConfig {
        s_width: t.s_width(),
        e_width: t.e_width(),
        hidden: setup.channel_hidden,
        message_dim: setup.message_dim,
        dropout: setup.channel_dropout,
    });
    let need_teacher = || {
        teacher_cfg
            .clone()
            .ok_or_else(|| Error::Shape("method requires a teacher model".into()))
    };
    let pair = match method {
        Method::Scratch | Method::Ld => {
            (CommChannel::empty("student"), CommChannel::empty("teacher"))
        }
        Method::Fd | Method::Hybrid => (
            CommChannel::encoder_only("student", &student_cfg, rng),
            CommChannel::encoder_only("teacher", &need_teacher()?, rng),
        ),
        Method::FitNet => {
            let teacher = teacher
                .ok_or_else(|| Error::Shape("fitnet requires a teacher model".into()))?;
            (
                CommChannel::decoder_only("student", &student_cfg, teacher.state_width(), rng),
                CommChannel::empty("teacher"),
            )
        }
        Method::Td => (
            CommChannel::full("student", &student_cfg, rng),
            CommChannel::full("teacher", &need_teacher()?, rng),
        ),
    };
    // Shared-space contract: both encoders project into the same width.
    if let (Some(se), Some(te)) = (&pair.0.encoder, &pair.1.encoder) {
        if se.message_dim() != te.message_dim() {
            return Err(Error::Shape(format!(
                "message dims differ: student {} vs teacher {}",
                se.message_dim(),
                te.message_dim()
            )));
        }
    }
    Ok(pair)
}

/// Named snapshot of every trainable tensor (student body + channels).
pub type TensorSnapshot = Vec<(String, Vec<usize>, Vec<f32>)>;

#[derive(Debug)]
pub struct TrainOutcome {
    pub student: PartitionedNet,
    pub student_channel: CommChannel,
    pub teacher_channel: CommChannel,
    pub history: Vec<MetricRow>,
    pub best: TensorSnapshot,
    pub best_step: usize,
    pub best_rmse: f64,
    pub final_rmse: f64,
}

fn snapshot(
    student: &PartitionedNet,
    student_channel: &CommChannel,
    teacher_channel: &CommChannel,
) -> TensorSnapshot {
    let mut out = TensorSnapshot::new();
    for (name, t) in student.named_params("student") {
        out.push((name, t.shape.clone(), t.data.clone()));
    }
    for (name, t) in student_channel.named_params("E_g", "D_g") {
        out.push((name, t.shape.clone(), t.data.clone()));
    }
    for (name, t) in teacher_channel.named_params("E_h", "D_h") {
        out.push((name, t.shape.clone(), t.data.clone()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    StudentOnly,
    ChannelsOnly,
    Joint,
}

fn phase_at(step: usize, ramp: Option<RampUp>) -> Phase {
    match ramp {
        None => Phase::Joint,
        Some(r) => {
            if step <= r.student_steps {
                Phase::StudentOnly
            } else if step <= r.student_steps + r.channel_steps {
                Phase::ChannelsOnly
            } else {
                Phase::Joint
            }
        }
    }
}

/// Full training run for one method. The teacher, when given, must already
/// be frozen; its parameters are verified unchanged at the end.
pub fn train(
    teacher: Option<&PartitionedNet>,
    task: &TaskData,
    setup: &ExperimentSetup,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if task.train_len() == 0 {
        return Err(Error::Data("train split is empty".into()));
    }
    if let Some(t) = teacher {
        if !t.is_frozen() {
            return Err(Error::Shape("teacher must be frozen before training".into()));
        }
    }
    let teacher_checksum = teacher.map(|t| t.checksum());

    let mut init_student = Rng::derive(cfg.seed, "init.student");
    let features = task
        .feature_dims()
        .map(|dims| FeatureEncoder::new(dims, &mut init_student));
    let mut student = PartitionedNet::new(&setup.student_cfg, features, &mut init_student)?;

    let mut init_channels = Rng::derive(cfg.seed, "init.channels");
    let (mut student_channel, mut teacher_channel) =
        build_channels(cfg.method, setup, &student, teacher, &mut init_channels)?;

    let mut rngs = StepRngs::derive(cfg.seed);
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });

    // Stable parameter naming, aligned with params_mut order.
    let param_names: Vec<String> = {
        let mut names: Vec<String> =
            student.named_params("student").into_iter().map(|(n, _)| n).collect();
        names.extend(student_channel.named_params("E_g", "D_g").into_iter().map(|(n, _)| n));
        names.extend(teacher_channel.named_params("E_h", "D_h").into_iter().map(|(n, _)| n));
        names
    };

    let start = Instant::now();
    let mut history: Vec<MetricRow> = Vec::new();
    let mut best: TensorSnapshot = TensorSnapshot::new();
    let mut best_rmse = f64::INFINITY;
    let mut best_step = 0usize;
    let mut prev_phase = phase_at(1, cfg.ramp_up);
    if prev_phase == Phase::ChannelsOnly {
        student.set_frozen(true);
    }
    let mut final_rmse = f64::NAN;

    for step in 1..=cfg.train_steps {
        let phase = phase_at(step, cfg.ramp_up);
        if phase != prev_phase {
            if phase == Phase::ChannelsOnly {
                student.set_frozen(true);
            }
            if phase == Phase::Joint && prev_phase != Phase::Joint {
                student.set_frozen(false);
            }
            history.push(MetricRow::metric(
                step,
                start.elapsed().as_millis(),
                "train",
                cfg.method.as_str(),
                cfg.iterations,
                "phase",
                match phase {
                    Phase::StudentOnly => 1.0,
                    Phase::ChannelsOnly => 2.0,
                    Phase::Joint => 3.0,
                },
            ));
            prev_phase = phase;
        }

        let batch = task.sample_train_batch(&mut rngs.data, cfg.batch_size)?;
        let mut tape = Tape::new();
        let models = DistillModels {
            teacher,
            student: &student,
            student_channel: &student_channel,
            teacher_channel: &teacher_channel,
        };
        let (total, report) = match (cfg.method, phase) {
            (Method::Scratch, _) | (_, Phase::StudentOnly) => {
                let (v, r) = scratch_step(&mut tape, &student, &batch, &mut rngs)?;
                (v, r)
            }
            (Method::Td, _) => {
                let (v, r, _) = td_step(&mut tape, &models, &batch, cfg, &mut rngs, false)?;
                (v, r)
            }
            _ => baseline_step(&mut tape, &models, &batch, cfg, &mut rngs)?,
        };
        let total_value = tape.scalar(total);
        if !total_value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {step}: {report:?}"
            )));
        }
        tape.backward(total)?;

        {
            let mut params = student.params_mut();
            params.extend(student_channel.params_mut());
            params.extend(teacher_channel.params_mut());
            tape.export_grads(&mut params);
            let mut named: Vec<(&str, &mut Tensor)> = param_names
                .iter()
                .map(|n| n.as_str())
                .zip(params)
                .collect();
            adam.step(&mut named).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("step {step}: {msg}")),
                other => other,
            })?;
        }

        history.push(MetricRow::train_loss(
            step,
            start.elapsed().as_millis(),
            cfg.method.as_str(),
            cfg.iterations,
            &report,
        ));

        if step % cfg.eval_every == 0 || step == cfg.train_steps {
            let rmse = evaluate_rmse(&student, task, cfg.batch_size.max(256))?;
            history.push(MetricRow::metric(
                step,
                start.elapsed().as_millis(),
                "eval",
                cfg.method.as_str(),
                cfg.iterations,
                "rmse",
                rmse,
            ));
            if rmse < best_rmse {
                best_rmse = rmse;
                best_step = step;
                best = snapshot(&student, &student_channel, &teacher_channel);
            }
            final_rmse = rmse;
        }
    }

    if cfg.train_steps == 0 {
        final_rmse = evaluate_rmse(&student, task, cfg.batch_size.max(256))?;
        best_rmse = final_rmse;
        best = snapshot(&student, &student_channel, &teacher_channel);
    }

    if let (Some(t), Some(before)) = (teacher, teacher_checksum) {
        if t.checksum() != before {
            return Err(Error::Shape(
                "teacher parameters changed during training (freeze violated)".into(),
            ));
        }
    }

    Ok(TrainOutcome {
        student,
        student_channel,
        teacher_channel,
        history,
        best,
        best_step,
        best_rmse,
        final_rmse,
    })
}
