//! Talking-model distillation: interactive teacher-student knowledge
//! transfer through a learned message space, plus the classical one-way
//! distillation baselines, on a small self-contained f32 autodiff kernel.

pub mod analysis;
pub mod checkpoint;
pub mod comm;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

#[cfg(feature = "testkit")]
pub mod testkit;

pub use error::{Error, Result};
