//! Dense f32 tensors: the storage type for parameters and batch data.
//!
//! A `Tensor` owns a flat row-major buffer plus an optional gradient buffer
//! of the same shape. Every tensor carries a process-unique id; the autodiff
//! tape uses it to recognize a parameter that participates in a step more
//! than once and to route gradients back after the backward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct Tensor {
    id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    /// When false the tape treats this tensor as a constant: no gradient is
    /// accumulated for it and the optimizer must skip it.
    pub requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel(&shape)
            )));
        }
        Ok(Tensor { id: fresh_id(), shape, data, grad: None, requires_grad: true })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { id: fresh_id(), shape, data: vec![0.0; n], grad: None, requires_grad: true }
    }

    /// He-style uniform init scaled by fan-in: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
    pub fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Self {
        let n = numel(&shape);
        let limit = (6.0 / fan_in.max(1) as f32).sqrt();
        let data = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
        Tensor { id: fresh_id(), shape, data, grad: None, requires_grad: true }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Copy of the value with a fresh identity and no gradient.
    pub fn clone_value(&self) -> Tensor {
        Tensor {
            id: fresh_id(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    /// Overwrite values in place (shape must match). Identity is preserved.
    pub fn load_data(&mut self, data: &[f32]) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot load {} values into tensor of shape {:?}",
                data.len(),
                self.shape
            )));
        }
        self.data.copy_from_slice(data);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive hash of the value bits; used by freeze checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.data {
            h ^= v.to_bits() as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}
