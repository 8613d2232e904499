//! The distillation loss terms and the combined training objective.
//!
//! Every term uses the same distance: mean squared error over all elements,
//! so loss weights are invariant to batch size and feature width. Terms
//! with zero weight are excised from the graph entirely, which makes the
//! zero-weight model gradient-identical to the model with that term absent.

use crate::comm::{CommChannel, Message};
use crate::error::{Error, Result};
use crate::nets::HiddenStates;
use crate::rng::Rng;
use crate::tape::{Mode, Tape, Var};

/// Loss weights: w1/w2/w3 for the interactive method, per-method weights
/// for the baselines. All must be non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// w1, weight of each per-iteration interaction term.
    pub interact: f32,
    /// w2, weight of the message-consistency term.
    pub mc: f32,
    /// w3, weight of the state-consistency term.
    pub sc: f32,
    pub logit: f32,
    pub feature: f32,
    pub fitnet: f32,
    pub hybrid_logit: f32,
    pub hybrid_feature: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            interact: 0.0,
            mc: 0.0,
            sc: 0.0,
            logit: 0.0,
            feature: 0.0,
            fitnet: 0.0,
            hybrid_logit: 0.0,
            hybrid_feature: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("w1", self.interact),
            ("w2", self.mc),
            ("w3", self.sc),
            ("logit", self.logit),
            ("feature", self.feature),
            ("fitnet", self.fitnet),
            ("hybrid_logit", self.hybrid_logit),
            ("hybrid_feature", self.hybrid_feature),
        ];
        for (name, w) in all {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::Config(format!(
                    "loss weight {name} must be a non-negative finite value, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar values of each term for one step, raw and as weighted
/// contributions matching the metrics-log columns.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub gt: f32,
    /// Raw interaction loss per communication iteration.
    pub interact_raw: Vec<f32>,
    pub mc_raw: f32,
    pub sc_raw: f32,
    pub logit_raw: f32,
    pub feature_raw: f32,
    pub fitnet_raw: f32,
    /// Weighted contribution logged in the `loss_interact` column: the
    /// method's primary distillation term(s).
    pub col_interact: f32,
    /// Weighted contribution logged in the `loss_mc` column: the
    /// message-space term (L_MC, or L_feature for the fd/hybrid baselines).
    pub col_mc: f32,
    /// Weighted contribution logged in the `loss_sc` column.
    pub col_sc: f32,
    pub total: f32,
}

impl LossReport {
    /// The column decomposition must re-sum to the total.
    pub fn column_residual(&self) -> f32 {
        self.total - (self.gt + self.col_interact + self.col_mc + self.col_sc)
    }
}

/// Logit distillation distance between student and teacher predictions.
/// The teacher side is expected to come from an eval-mode, frozen forward.
pub fn l_logit(tape: &mut Tape, y_g: Var, y_h: Var) -> Result<Var> {
    tape.mse(y_g, y_h)
}

/// Feature distillation distance between the two encoded messages.
pub fn l_feature(tape: &mut Tape, m_g: Message, m_h: Message) -> Result<Var> {
    tape.mse(m_g, m_h)
}

/// Student-side decoding of raw teacher states against the student's own
/// states. The teacher states pass through untouched (identity encoder);
/// the student decoder must be configured with the teacher's state width.
pub fn l_fitnet(
    tape: &mut Tape,
    student_states: &HiddenStates,
    teacher_states: &HiddenStates,
    student_channel: &CommChannel,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let decoded = student_channel.decode(tape, teacher_states.cat, mode, rng)?;
    tape.mse(student_states.cat, decoded.cat)
}

/// Interaction loss: the student's current states against the states
/// decoded from the teacher's returned message.
pub fn l_interact(tape: &mut Tape, current_states: Var, decoded_states: Var) -> Result<Var> {
    tape.mse(current_states, decoded_states)
}

/// Message consistency on the iteration-0 messages of the same input batch.
pub fn l_mc(tape: &mut Tape, m_g0: Message, m_h0: Message) -> Result<Var> {
    tape.mse(m_g0, m_h0)
}

/// State consistency on the iteration-0 messages: each model decodes the
/// other's message and is held to its own states. Decodes run student-side
/// first, then teacher-side.
#[allow(clippy::too_many_arguments)]
pub fn l_sc(
    tape: &mut Tape,
    student_states: &HiddenStates,
    teacher_states: &HiddenStates,
    m_g0: Message,
    m_h0: Message,
    student_channel: &CommChannel,
    teacher_channel: &CommChannel,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let dec_g = student_channel.decode(tape, m_h0, mode, rng)?;
    let term_g = tape.mse(student_states.cat, dec_g.cat)?;
    let dec_h = teacher_channel.decode(tape, m_g0, mode, rng)?;
    let term_h = tape.mse(teacher_states.cat, dec_h.cat)?;
    tape.add(term_g, term_h)
}

/// Weighted sum of the ground-truth loss, the per-iteration interaction
/// terms (all sharing w1), and the consistency terms. Zero-weight terms are
/// not added to the graph at all.
pub fn combined_loss(
    tape: &mut Tape,
    gt: Var,
    interact_terms: &[Var],
    mc: Option<Var>,
    sc: Option<Var>,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let mut report = LossReport {
        gt: tape.scalar(gt),
        interact_raw: interact_terms.iter().map(|v| tape.scalar(*v)).collect(),
        mc_raw: mc.map(|v| tape.scalar(v)).unwrap_or(0.0),
        sc_raw: sc.map(|v| tape.scalar(v)).unwrap_or(0.0),
        ..LossReport::default()
    };
    let mut total = gt;
    if weights.interact > 0.0 {
        for &term in interact_terms {
            let w = tape.scale(term, weights.interact);
            total = tape.add(total, w)?;
        }
        report.col_interact = weights.interact * report.interact_raw.iter().sum::<f32>();
    }
    if weights.mc > 0.0 {
        if let Some(mc) = mc {
            let w = tape.scale(mc, weights.mc);
            total = tape.add(total, w)?;
            report.col_mc = weights.mc * report.mc_raw;
        }
    }
    if weights.sc > 0.0 {
        if let Some(sc) = sc {
            let w = tape.scale(sc, weights.sc);
            total = tape.add(total, w)?;
            report.col_sc = weights.sc * report.sc_raw;
        }
    }
    report.total = tape.scalar(total);
    Ok((total, report))
}
