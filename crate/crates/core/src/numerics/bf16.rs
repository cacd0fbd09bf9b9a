// SPDX-License-Identifier: MIT OR Apache-2.0

//! bfloat16: 1 sign, 8 exponent, 7 mantissa bits. Same exponent range as f32.

use std::fmt;

use super::grid::round_magnitude;

const MANT_BITS: i32 = 7;
const EMIN: i32 = -126;
/// (2 - 2^-7) * 2^127
pub const BF16_MAX: f64 = 3.389_531_389_251_535_5e38;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(transparent)]
pub struct Bf16(u16);

impl Bf16 {
    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Self(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round-to-nearest-even from f64, overflowing to infinity. Rounding
    /// happens once, directly from the f64 value.
    pub fn from_f64(x: f64) -> Self {
        if x.is_nan() {
            let sign = if x.is_sign_negative() { 0x8000 } else { 0 };
            return Self(sign | 0x7fc0);
        }
        let a = x.abs();
        let r = if a == 0.0 || a.is_infinite() {
            a
        } else {
            let r = round_magnitude(a, MANT_BITS, EMIN);
            if r > BF16_MAX {
                f64::INFINITY
            } else {
                r
            }
        };
        let signed = if x.is_sign_negative() { -r } else { r };
        // The rounded value is exactly representable in f32.
        Self(((signed as f32).to_bits() >> 16) as u16)
    }

    #[inline]
    pub fn from_f32(x: f32) -> Self {
        Self::from_f64(f64::from(x))
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f32::from_bits(u32::from(self.0) << 16)
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        f64::from(self.to_f32())
    }
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bf16({:#06x} = {})", self.0, self.to_f32())
    }
}

#[inline]
pub fn round_bf16(x: f64) -> f64 {
    Bf16::from_f64(x).to_f64()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference conversion by integer rounding of the f32 bit pattern.
    fn reference(x: f32) -> u16 {
        let bits = x.to_bits();
        (bits.wrapping_add(0x7fff + ((bits >> 16) & 1)) >> 16) as u16
    }

    #[test]
    fn matches_bit_rounding_on_f32_inputs() {
        let mut state = 0x1234_5678_u32;
        for _ in 0..200_000 {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            let x = f32::from_bits(state);
            if !x.is_finite() {
                continue;
            }
            assert_eq!(Bf16::from_f32(x).to_bits(), reference(x), "x = {x:e}");
        }
    }

    #[test]
    fn keeps_seven_mantissa_bits() {
        let x = 1.0 + 2f64.powi(-7);
        assert_eq!(round_bf16(x), x);
        assert_eq!(round_bf16(1.0 + 2f64.powi(-9)), 1.0);
        assert_eq!(round_bf16(f64::from(f32::MIN_POSITIVE)), f64::from(f32::MIN_POSITIVE));
        assert!(round_bf16(1e39).is_infinite());
    }
}
