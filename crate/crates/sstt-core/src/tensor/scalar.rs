//! Scalar abstraction over the two float widths the kernel runs in.
//!
//! Training and inference use `f32`. Gradient-checking tests instantiate the
//! whole stack with `f64`, where central finite differences are trustworthy.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Copy + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    const DTYPE: &'static str;

    fn erf(self) -> Self;

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 -> scalar conversion")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }

    /// On-disk representation is always little-endian f32 (checkpoint codec).
    fn to_f32c(self) -> f32 {
        self.to_f32().expect("scalar -> f32 conversion")
    }

    fn from_f32c(v: f32) -> Self {
        Self::from_f32(v).expect("f32 -> scalar conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }
}
