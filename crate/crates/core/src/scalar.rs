//! Scalar abstraction for the numeric core.
//!
//! Model, loss, and optimizer code is generic over [`Scalar`] so the same
//! implementation runs in `f32` or `f64`. Tests and the command-line tools
//! use `f64`, which is what makes 1e-4-tight finite-difference gradient
//! checks possible; `f32` remains available for cheaper experimentation.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type usable throughout the numeric core.
///
/// The supertraits cover everything the core needs: `Float` for math,
/// conversions both ways for constants and logging, assign ops for in-place
/// updates, and the `ndarray` operand traits so `Array2<F>::dot` dispatches
/// to the fast matrix-multiply path for `f32`/`f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Converts a finite `f64` constant into this scalar type.
    ///
    /// Panics on values that do not convert (never the case for the finite
    /// literals used internally).
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant must convert")
    }

    /// Converts to `f64` for logging, serialization, and cross-type checks.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
