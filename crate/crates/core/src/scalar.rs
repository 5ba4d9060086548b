//! Scalar abstraction shared by every numeric module.

use std::fmt;

use nalgebra::{ClosedAddAssign, ClosedDivAssign, ClosedMulAssign, ClosedSubAssign};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the planner, the predictor, the QP solver and the simulator.
///
/// Implemented for `f32` and `f64`. Arithmetic comes from [`num_traits::Float`]; the nalgebra
/// operator bounds only exist so dense `DMatrix<T>` products compile generically.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + nalgebra::Scalar
    + ClosedAddAssign
    + ClosedSubAssign
    + ClosedMulAssign
    + ClosedDivAssign
    + fmt::Display
    + Default
    + Send
    + Sync
{
    /// Converts an `f64` literal. Panics only for values the type cannot represent at all.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
