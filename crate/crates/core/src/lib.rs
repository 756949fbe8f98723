//! Few-shot common action localization.
//!
//! Given a handful of trimmed support videos that share one action and an
//! untrimmed query video, the pipeline localizes the temporal segments of the
//! query where that action occurs, without ever being told the action label.
//! Support and query features enhance each other through cross-attention,
//! the enhanced query proposals are aligned progressively against the
//! supports, and a pairwise matcher weighs each proposal by its agreement
//! with every support before classification and boundary refinement.
//!
//! The numeric core is generic over the scalar type: training runs in `f32`,
//! verification and gradient checking in `f64`.

pub mod alignment;
pub mod data;
pub mod diffcore;
pub mod engine;
pub mod eval;
pub mod features;
pub mod heads;
pub mod model;
pub mod proposals;
pub mod report;
pub mod selftest;
pub mod scalar;
pub mod temporal;

pub use scalar::Scalar;

/// Tensors at training precision.
pub type Tensor32 = diffcore::Tensor<f32>;
/// Tensors at verification precision.
pub type Tensor64 = diffcore::Tensor<f64>;

/// Segment geometry at the precision used by data handling and evaluation.
pub type Segment = temporal::TemporalSegment<f64>;
pub type ScoredSegment = temporal::ScoredSegment<f64>;
