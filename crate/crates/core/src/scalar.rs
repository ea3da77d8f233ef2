//! Floating-point abstraction: f64 for gradient checks and training,
//! f32 for benchmarks and serialized weights.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Element type of every tensor in the crate.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough cast from an f64 literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn to_f64x(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar convertible to f64")
    }

    fn to_f32x(self) -> f32 {
        num_traits::ToPrimitive::to_f32(&self).expect("scalar convertible to f32")
    }

    fn from_f32x(x: f32) -> Self {
        Self::from_f32(x).expect("f32 representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
