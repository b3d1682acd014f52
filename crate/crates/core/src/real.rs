//! Floating-point element type shared by the tensor engine and the DSP kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use rustfft::num_traits::{Float, FloatConst};
use rustfft::FftNum;

/// Scalar type the engine computes in.
///
/// Training runs in `f32`; gradient verification runs in `f64`.
pub trait Real: Float + FloatConst + FftNum + Default + Sum + Debug + Display + 'static {
    /// Converts an `f64` literal.
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Converts a slice of `f64` values into the target precision.
pub fn cast_slice<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::lit(x)).collect()
}

/// Widens a slice into `f64`.
pub fn widen<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.as_f64()).collect()
}
