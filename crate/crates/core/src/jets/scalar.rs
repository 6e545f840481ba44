use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Real-number abstraction shared by plain `f64` evaluation and tape-tracked
/// evaluation. Jets are generic over it, which is what lets one code path
/// produce both inference values and parameter gradients.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;

    /// A constant living in the same evaluation context as `self`.
    fn lift(self, v: f64) -> Self;

    /// Elementary unary function with known value and local derivative at `self`.
    fn chain(self, value: f64, derivative: f64) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }

    #[inline]
    fn lift(self, v: f64) -> Self {
        v
    }

    #[inline]
    fn chain(self, value: f64, _derivative: f64) -> Self {
        value
    }
}
