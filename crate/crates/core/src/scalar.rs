//! Scalar abstraction for the numeric core.
//!
//! Everything differentiable is generic over [`Scalar`] so the same code runs
//! in 32-bit for training throughput and in 64-bit for verification and
//! gradient checking. Conversions route through `f64`, which is exact for
//! every value either width can represent.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub trait Scalar:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }

    fn to_f64(self) -> f64;

    /// Total order over all bit patterns, used wherever a reduction or a sort
    /// must not depend on input enumeration order.
    fn total_cmp(&self, other: &Self) -> Ordering;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        f32::total_cmp(self, other)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        f64::total_cmp(self, other)
    }
}

/// Sum of `buf` in a canonical order: addends are sorted by their total order
/// before folding, so the result is independent of how the inputs were
/// enumerated. Used for reductions that must be invariant under support
/// reordering. Sorts in place; the buffer is scratch space.
pub fn canonical_sum<F: Scalar>(buf: &mut [F]) -> F {
    buf.sort_unstable_by(|a, b| a.total_cmp(b));
    let mut acc = F::zero();
    for &v in buf.iter() {
        acc += v;
    }
    acc
}
