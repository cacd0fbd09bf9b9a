// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Native compute scalar. `P32` work runs in this type; every emulated
/// low-precision format round-trips through `f64`, which holds both `f32`
/// and `f64` values exactly.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Bit pattern widened to 64 bits, used for bitwise comparisons.
    fn bits(self) -> u64;

    #[inline]
    fn as_f64(self) -> f64 {
        // f32 -> f64 is exact; f64 -> f64 is the identity.
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {
    #[inline]
    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Bitwise equality of two scalar slices (NaN patterns compared as bits).
pub fn bitwise_eq<S: Scalar>(a: &[S], b: &[S]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bits() == y.bits())
}
