//! Test-only oracles (enabled by the `testkit` feature).
//!
//! Everything here recomputes results through an independent route — flat
//! hand-chained buffers, Gram-matrix identities — and never calls into the
//! tape's backward pass or the engine's step functions.

pub mod oracles;
pub mod straightline;
