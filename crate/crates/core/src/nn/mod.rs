//! Minimal deterministic tensor/layer library with reverse-mode gradients.
//!
//! Everything runs on plain `Vec<f64>` storage; forward functions either are
//! pure or return an explicit context that the matching backward function
//! consumes. Determinism contract: identical seeds and inputs give
//! bit-identical outputs (parallel loops only ever write disjoint slices and
//! reductions run in a fixed order).

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layer;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, CheckpointLayer};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layer::{Layer, LayerCache, Stack};
pub use ops::Pad;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(usize),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
