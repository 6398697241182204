//! Scalar abstraction for the numeric core.
//!
//! All tensor and tape code is written against [`Scalar`] rather than a
//! concrete float so the same kernels serve `f32` and `f64`. Configuration
//! structs stay in `f64` and convert at the boundary via [`cast`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type usable by tensors, tapes, and layers.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` configuration value into the working scalar type.
///
/// Panics only if the conversion is unrepresentable, which cannot happen for
/// the float-to-float conversions admitted by [`Scalar`].
pub fn cast<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("f64 must convert into the working scalar type")
}

#[cfg(test)]
mod tests {
    use super::cast;

    #[test]
    fn cast_is_exact_for_f64() {
        let x: f64 = cast(0.1);
        assert_eq!(x, 0.1);
    }

    #[test]
    fn cast_rounds_to_f32() {
        let x: f32 = cast(0.1);
        assert_eq!(x, 0.1f32);
    }
}
