//! Scalar abstraction so the whole stack runs in either f32 or f64.
//!
//! f32 is the working precision of the artifact (files, training, CLI);
//! f64 instantiations back the finite-difference oracles, where f32
//! rounding at step sizes around 1e-3 would drown the signal.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

pub trait Scalar:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from f64 (used for constants and RNG draws).
    fn from_f64(v: f64) -> Self;

    /// Widening conversion for oracles and reporting.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
