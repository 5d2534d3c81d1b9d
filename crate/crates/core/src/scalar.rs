use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type for tensors, tapes and networks: `f32` for
/// training and sampling, `f64` for gradient checks and coefficient algebra.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// Bytes of the little-endian 32-bit encoding used by every file format.
    fn to_f32_bits(self) -> u32 {
        (self.f64() as f32).to_bits()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
