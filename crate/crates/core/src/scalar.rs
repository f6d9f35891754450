//! Scalar abstraction for all tensor math.
//!
//! Everything numeric in this crate is generic over [`Scalar`], a thin
//! extension of `num_traits::Float`. The concrete aliases at the crate root
//! pin `f64`, which is what the gradient-check tolerances and the on-disk
//! formats assume; `f32` is available for experiments that do not need to
//! pass the finite-difference suite.

use num_traits::Float;
use std::fmt::{Debug, Display};

pub trait Scalar:
    Float + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; used for literals and config values.
    fn from_f64(v: f64) -> Self;

    /// Lossy conversion to `f64`; used for persistence and reporting.
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}
