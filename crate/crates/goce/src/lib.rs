//! Desk-scale causal-graph transformer: a tape-based autodiff core, a
//! differentiable sparse graph builder, causally masked attention with
//! consistency and sparsity losses, causally gated sparse experts, a
//! do-intervention objective, and an annealed self-evolution gate, assembled
//! into a trainable classifier over synthetic relation-composition tasks.
// index loops match the triangular edge/adjacency math throughout
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod error;
pub mod evolution;
pub mod graph;
pub mod intervention;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod tasks;

pub use error::{GoceError, Result};
