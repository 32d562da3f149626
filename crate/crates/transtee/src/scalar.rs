use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type for the tensor core.
///
/// All higher-level modules use the `f64` aliases exported at the crate
/// root; gradient checking needs the headroom. The core math itself is
/// written against this trait so `f32` works where precision is not
/// load-bearing.
pub trait Scalar:
    Float + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Conversion for literals and config constants.
    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
