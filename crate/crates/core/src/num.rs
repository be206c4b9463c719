//! Scalar traits shared by the numeric modules.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num, NumCast, ToPrimitive};

/// Floating-point element type of embedding vectors (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + NumCast + Debug + Default + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + NumCast + Debug + Default + Send + Sync + 'static
{
}

/// Number type that evaluation metrics are computed in.
///
/// Implemented for the float types and for exact rationals, so metric
/// identities can be checked without rounding error.
pub trait MetricValue: Num + Clone + PartialOrd + ToPrimitive + Debug {
    fn from_count(n: usize) -> Self;
}

impl MetricValue for f64 {
    fn from_count(n: usize) -> Self {
        n as f64
    }
}

impl MetricValue for f32 {
    fn from_count(n: usize) -> Self {
        n as f32
    }
}

impl MetricValue for Ratio<i64> {
    fn from_count(n: usize) -> Self {
        Ratio::from_integer(n as i64)
    }
}

impl MetricValue for Ratio<i128> {
    fn from_count(n: usize) -> Self {
        Ratio::from_integer(n as i128)
    }
}
