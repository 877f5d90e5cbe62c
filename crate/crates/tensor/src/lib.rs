//! Minimal reverse-mode differentiable array engine.
//!
//! Double precision throughout, pure-functional graph construction (no op
//! mutates its inputs), deterministic: the same seed and op order produce
//! bitwise-identical values. Built for desk-scale sequence models: 2-D
//! matrices, vectors and scalars, with the ops needed by residual conv
//! stacks and attention blocks. Shape errors are programmer errors and
//! panic with both shapes named.

mod graph;

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;

pub use graph::{concat_cols, concat_rows, sinusoidal_time_features, Tensor};
pub use params::{Binding, ParamId, ParamSet};
