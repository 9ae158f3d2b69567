use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar element of a [`crate::tensor::Tensor`].
///
/// Verification suites run at `f64`; `f32` exists for throughput benchmarks.
pub trait Element:
    Float + num_traits::NumAssign + Copy + Send + Sync + Debug + Display + 'static
{
    /// Precision name recorded in run manifests ("f32" / "f64").
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Gauss error function, exact form used by GELU.
    fn erf(self) -> Self;
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn erf(self) -> Self {
        // evaluate in f64: erff loses a couple of digits near the tails
        libm::erf(self as f64) as f32
    }
}
