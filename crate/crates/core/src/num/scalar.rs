//! Scalar abstraction: the numeric core is generic over `f32`/`f64`.
//!
//! Production paths run on `f32` (see the crate-root aliases); gradient
//! checks instantiate the same code on `f64` so that central finite
//! differences are not drowned by single-precision rounding.

use std::fmt::{Debug, Display};

/// Floating-point scalar the tensor engine operates on.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` (oracle and RNG side).
    fn from_f64c(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("f64 -> scalar conversion")
    }

    fn to_f64c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Inputs above this are clamped before exponentiation so softmax and
/// attention cannot overflow on desk-scale values.
pub const EXP_CLAMP: f64 = 30.0;
