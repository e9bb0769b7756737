use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// Real scalar used by the numeric parts of the pipeline: f32 or f64.
///
/// Integer-valued stages (MSER, granule counting, IoU on pixel rects) do not
/// go through this trait; only the places where real arithmetic happens do.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Lossless for f32, rounding for f64.
    fn to_f32_lossy(self) -> f32;

    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("scalar literal out of range")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}
