//! Adam with bias correction.
//!
//! State is positional: the same parameter list, in the same order, must be
//! passed on every step. Frozen tensors (`requires_grad == false`) are
//! skipped entirely, including their moment buffers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug)]
pub struct AdamState {
    cfg: AdamConfig,
    /// First and second moment buffers, one pair per parameter position.
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    /// Step counter; increments by exactly one per `step` call.
    t: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState { cfg, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Apply one update using each tensor's `grad` buffer. Parameter names
    /// are used only for diagnostics.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer state covers {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        // Validate before mutating anything so a bad step leaves parameters
        // and moments untouched.
        for (name, t) in params.iter() {
            if let Some(g) = &t.grad {
                if t.requires_grad && !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient for parameter '{name}'"
                    )));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            if !tensor.requires_grad {
                continue;
            }
            let Some(grad) = tensor.grad.as_ref() else { continue };
            debug_assert_eq!(grad.len(), tensor.data.len());
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..tensor.data.len() {
                let g = grad[j];
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                tensor.data[j] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
