use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of a [`Tensor`](super::Tensor).
///
/// Training runs in `f32`. The same generic code is instantiated with `f64`
/// for finite-difference gradient checks, where single precision cannot
/// resolve a 1e-3 central difference to 1e-4 relative accuracy.
pub trait Scalar:
    num_traits::Float + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
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
