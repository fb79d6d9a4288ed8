//! Floating-point scalar abstraction shared by the tensor engine and the model.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar type a [`Tensor`](crate::tensor::Tensor) can hold: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Complementary error function.
    fn erfc(self) -> Self;

    /// Lossy conversion from `f64`; constants in generic code go through here.
    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Standard normal CDF, evaluated through `erfc` so the lower tail keeps
    /// its relative precision.
    fn normal_cdf(self) -> Self {
        let half = Self::from_f64_lossy(0.5);
        half * (-self * Self::FRAC_1_SQRT_2()).erfc()
    }

    /// Standard normal density.
    fn normal_pdf(self) -> Self {
        let inv_sqrt_2pi = Self::FRAC_2_SQRT_PI() * Self::FRAC_1_SQRT_2() * Self::from_f64_lossy(0.5);
        inv_sqrt_2pi * (-(self * self) * Self::from_f64_lossy(0.5)).exp()
    }
}

impl Scalar for f64 {
    fn erfc(self) -> Self {
        libm::erfc(self)
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_reference_points() {
        assert_eq!(0.0f64.normal_cdf(), 0.5);
        assert!((1.0f64.normal_cdf() - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!(((-10.0f64).normal_cdf() - 7.619_853_024_160_47e-24).abs() < 1e-36);
        assert!((1.0f32.normal_cdf() - 0.841_344_7).abs() < 1e-6);
    }

    #[test]
    fn normal_pdf_at_zero() {
        assert!((0.0f64.normal_pdf() - 0.398_942_280_401_432_7).abs() < 1e-15);
    }
}
