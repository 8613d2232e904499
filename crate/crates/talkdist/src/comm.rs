//! Communication channels: per-model encoders into a shared message space
//! and decoders back into the model's own hidden-state space.
//!
//! Both directions use the same block: dense -> relu -> layer norm ->
//! dropout -> dense, so the projection into and out of the message space
//! stays linear. Channel parameters are trainable even when the owning
//! model is frozen.

use crate::error::{Error, Result};
use crate::nets::HiddenStates;
use crate::rng::Rng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// A message is a batch of vectors in the shared space; teacher and student
/// channels must agree on its width within one experiment.
pub type Message = Var;

#[derive(Debug, Clone)]
pub struct ChannelConfig {
    /// Lower-state width of the owning model.
    pub s_width: usize,
    /// Higher-state width of the owning model.
    pub e_width: usize,
    pub hidden: usize,
    pub message_dim: usize,
    pub dropout: f32,
}

impl ChannelConfig {
    pub fn state_width(&self) -> usize {
        self.s_width + self.e_width
    }
}

/// dense -> relu -> layer_norm -> dropout -> dense
#[derive(Debug)]
pub struct CommMlp {
    pub fc1: crate::nets::DenseLayer,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub fc2: crate::nets::DenseLayer,
    dropout: f32,
}

impl CommMlp {
    fn new(in_width: usize, hidden: usize, out_width: usize, dropout: f32, rng: &mut Rng) -> Self {
        CommMlp {
            fc1: crate::nets::DenseLayer::new(in_width, hidden, rng),
            gamma: Tensor::from_vec(vec![hidden], vec![1.0; hidden]).unwrap(),
            beta: Tensor::zeros(vec![hidden]),
            fc2: crate::nets::DenseLayer::new(hidden, out_width, rng),
            dropout,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h);
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        let h = tape.layer_norm(h, g, b)?;
        let h = tape.dropout(h, self.dropout, mode, rng)?;
        self.fc2.forward(tape, h)
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.fc1.w"), &self.fc1.w));
        out.push((format!("{prefix}.fc1.b"), &self.fc1.b));
        out.push((format!("{prefix}.ln.gamma"), &self.gamma));
        out.push((format!("{prefix}.ln.beta"), &self.beta));
        out.push((format!("{prefix}.fc2.w"), &self.fc2.w));
        out.push((format!("{prefix}.fc2.b"), &self.fc2.b));
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.fc1.w,
            &mut self.fc1.b,
            &mut self.gamma,
            &mut self.beta,
            &mut self.fc2.w,
            &mut self.fc2.b,
        ]
    }
}

/// Encoder E: {s; e} -> message.
#[derive(Debug)]
pub struct CommEncoder {
    pub mlp: CommMlp,
    in_width: usize,
    message_dim: usize,
}

/// Decoder D: message -> {s'; e'} split at the owner's s-width.
#[derive(Debug)]
pub struct CommDecoder {
    pub mlp: CommMlp,
    in_width: usize,
    s_width: usize,
    e_width: usize,
}

impl CommEncoder {
    pub fn new(cfg: &ChannelConfig, rng: &mut Rng) -> Self {
        CommEncoder {
            mlp: CommMlp::new(cfg.state_width(), cfg.hidden, cfg.message_dim, cfg.dropout, rng),
            in_width: cfg.state_width(),
            message_dim: cfg.message_dim,
        }
    }

    pub fn message_dim(&self) -> usize {
        self.message_dim
    }

    pub fn forward(&self, tape: &mut Tape, states_cat: Var, mode: Mode, rng: &mut Rng) -> Result<Message> {
        let got = *tape.shape(states_cat).last().unwrap();
        if got != self.in_width {
            return Err(Error::Shape(format!(
                "encoder expects state width {}, got {got}",
                self.in_width
            )));
        }
        self.mlp.forward(tape, states_cat, mode, rng)
    }
}

impl CommDecoder {
    pub fn new(cfg: &ChannelConfig, rng: &mut Rng) -> Self {
        Self::with_input_width(cfg, cfg.message_dim, rng)
    }

    /// Decoder reading from a space other than the shared message space;
    /// the student-side fitnet baseline decodes raw teacher states.
    pub fn with_input_width(cfg: &ChannelConfig, in_width: usize, rng: &mut Rng) -> Self {
        CommDecoder {
            mlp: CommMlp::new(in_width, cfg.hidden, cfg.state_width(), cfg.dropout, rng),
            in_width,
            s_width: cfg.s_width,
            e_width: cfg.e_width,
        }
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        message: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<HiddenStates> {
        let got = *tape.shape(message).last().unwrap();
        if got != self.in_width {
            return Err(Error::Shape(format!(
                "decoder expects input width {}, got {got}",
                self.in_width
            )));
        }
        let cat = self.mlp.forward(tape, message, mode, rng)?;
        let s = tape.slice_cols(cat, 0, self.s_width)?;
        let e = tape.slice_cols(cat, self.s_width, self.e_width)?;
        Ok(HiddenStates { s, e, cat })
    }
}

/// One model's communication pair. A baseline may carry only the half it
/// uses; calling the missing half is a contract violation.
#[derive(Debug)]
pub struct CommChannel {
    pub encoder: Option<CommEncoder>,
    pub decoder: Option<CommDecoder>,
    label: String,
}

impl CommChannel {
    pub fn full(label: &str, cfg: &ChannelConfig, rng: &mut Rng) -> Self {
        CommChannel {
            encoder: Some(CommEncoder::new(cfg, rng)),
            decoder: Some(CommDecoder::new(cfg, rng)),
            label: label.to_string(),
        }
    }

    pub fn encoder_only(label: &str, cfg: &ChannelConfig, rng: &mut Rng) -> Self {
        CommChannel {
            encoder: Some(CommEncoder::new(cfg, rng)),
            decoder: None,
            label: label.to_string(),
        }
    }

    pub fn decoder_only(label: &str, cfg: &ChannelConfig, in_width: usize, rng: &mut Rng) -> Self {
        CommChannel {
            encoder: None,
            decoder: Some(CommDecoder::with_input_width(cfg, in_width, rng)),
            label: label.to_string(),
        }
    }

    pub fn empty(label: &str) -> Self {
        CommChannel { encoder: None, decoder: None, label: label.to_string() }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        states: &HiddenStates,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Message> {
        let enc = self.encoder.as_ref().ok_or_else(|| {
            Error::Shape(format!("channel '{}' has no encoder", self.label))
        })?;
        enc.forward(tape, states.cat, mode, rng)
    }

    pub fn decode(&self, tape: &mut Tape, m: Message, mode: Mode, rng: &mut Rng) -> Result<HiddenStates> {
        let dec = self.decoder.as_ref().ok_or_else(|| {
            Error::Shape(format!("channel '{}' has no decoder", self.label))
        })?;
        dec.forward(tape, m, mode, rng)
    }

    /// Checkpoint names follow the channel layout: `<enc>.fc1.w`, ...
    pub fn named_params(&self, enc_prefix: &str, dec_prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(e) = &self.encoder {
            e.mlp.named(enc_prefix, &mut out);
        }
        if let Some(d) = &self.decoder {
            d.mlp.named(dec_prefix, &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.encoder {
            out.extend(e.mlp.tensors_mut());
        }
        if let Some(d) = &mut self.decoder {
            out.extend(d.mlp.tensors_mut());
        }
        out
    }
}

/// Additive gaussian noise drawn from the experiment RNG. Identity when
/// sigma is zero; negative sigma is a configuration error.
pub fn add_noise(tape: &mut Tape, x: Var, sigma: f32, rng: &mut Rng) -> Result<Var> {
    if sigma < 0.0 {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let noise: Vec<f32> = (0..n).map(|_| sigma * rng.normal()).collect();
    let nv = tape.constant(shape, noise)?;
    tape.add(x, nv)
}
