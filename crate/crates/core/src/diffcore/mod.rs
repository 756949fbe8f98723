//! Minimal differentiable computation core.
//!
//! A [`Tensor`] is a dense row-major array. Differentiable computations are
//! recorded on a [`Graph`] tape whose ops carry hand-derived backward passes;
//! [`gradcheck`] verifies every backward against central finite differences.
//! Named parameters live in a [`ParamStore`] and round-trip through a
//! self-describing binary checkpoint container.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, store_from_checkpoint, Checkpoint, CheckpointError,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{gradcheck, gradcheck_report, GradCheckReport, GRADCHECK_EPS};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamStore, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("tensor data length {got} does not match shape {shape:?}")]
    Length { got: usize, shape: Vec<usize> },
    #[error("backward root must hold a single value, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("parameter '{0}' registered twice")]
    DuplicateParam(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
