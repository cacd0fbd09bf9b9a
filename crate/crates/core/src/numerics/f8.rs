// SPDX-License-Identifier: MIT OR Apache-2.0

//! FP8 E4M3 (OCP convention): 1 sign, 4 exponent (bias 7), 3 mantissa bits.
//! No infinities; `S.1111.111` is NaN; overflow saturates to ±448.

use std::fmt;

use super::grid::{pow2, round_magnitude};

const BIAS: i32 = 7;
const MANT_BITS: i32 = 3;
const EMIN: i32 = 1 - BIAS;
const MAX_NORMAL_EXP: i32 = 15 - BIAS;

/// Largest finite magnitude.
pub const F8_MAX: f64 = 448.0;
/// Smallest positive normal, 2^-6.
pub const F8_MIN_NORMAL: f64 = 0.015_625;
/// Smallest positive subnormal, 2^-9.
pub const F8_MIN_SUBNORMAL: f64 = 0.001_953_125;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
#[repr(transparent)]
pub struct F8E4M3(u8);

impl F8E4M3 {
    pub const ZERO: Self = Self(0x00);
    pub const NAN: Self = Self(0x7f);
    pub const MAX: Self = Self(0x7e);
    pub const MIN_NORMAL: Self = Self(0x08);
    pub const MIN_SUBNORMAL: Self = Self(0x01);

    #[inline]
    pub const fn from_bits(bits: u8) -> Self {
        Self(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u8 {
        self.0
    }

    #[inline]
    pub const fn is_nan(self) -> bool {
        self.0 & 0x7f == 0x7f
    }

    #[inline]
    pub const fn is_sign_negative(self) -> bool {
        self.0 & 0x80 != 0
    }

    #[inline]
    pub const fn exponent_field(self) -> u8 {
        (self.0 >> 3) & 0x0f
    }

    #[inline]
    pub const fn mantissa_field(self) -> u8 {
        self.0 & 0x07
    }

    /// Round-to-nearest-even encode with saturation.
    pub fn encode(x: f64) -> Self {
        if x.is_nan() {
            return Self::NAN;
        }
        let sign = if x.is_sign_negative() { 0x80 } else { 0x00 };
        let a = x.abs();
        if a >= F8_MAX {
            return Self(sign | Self::MAX.0);
        }
        if a == 0.0 {
            return Self(sign);
        }
        let r = round_magnitude(a, MANT_BITS, EMIN);
        Self(sign | pack_magnitude(r))
    }

    #[inline]
    pub fn encode_f32(x: f32) -> Self {
        Self::encode(f64::from(x))
    }

    /// Exact value of the pattern.
    pub fn decode(self) -> f64 {
        if self.is_nan() {
            return f64::NAN;
        }
        let (mag, exp) = self.significand();
        let v = f64::from(mag) * pow2(exp - MANT_BITS);
        if self.is_sign_negative() {
            -v
        } else {
            v
        }
    }

    /// Integer significand (hidden bit included) and effective exponent, so
    /// that `|value| = significand * 2^(exponent - 3)`.
    #[inline]
    fn significand(self) -> (u8, i32) {
        let e = self.exponent_field();
        let m = self.mantissa_field();
        if e == 0 {
            (m, EMIN)
        } else {
            (0x08 | m, i32::from(e) - BIAS)
        }
    }

    /// Sum rounded to E4M3: the smaller operand is aligned to the larger
    /// operand's exponent with guard, round and sticky bits, the significands
    /// are added, and the result is rounded to nearest-even.
    pub fn add(self, rhs: Self) -> Self {
        if self.is_nan() || rhs.is_nan() {
            return Self::NAN;
        }
        let (mut big, mut small) = (self, rhs);
        let (mb, eb) = big.significand();
        let (ms, es) = small.significand();
        if (es, ms) > (eb, mb) {
            std::mem::swap(&mut big, &mut small);
        }
        let (m_big, e_big) = big.significand();
        let (m_small, e_small) = small.significand();
        let shift = (e_big - e_small) as u32;

        let wide_big = u32::from(m_big) << 3;
        let wide_small = u32::from(m_small) << 3;
        let aligned = if shift >= 32 {
            u32::from(wide_small != 0)
        } else {
            let kept = wide_small >> shift;
            let lost = wide_small & ((1u32 << shift) - 1) != 0;
            kept | u32::from(lost)
        };

        let same_sign = big.is_sign_negative() == small.is_sign_negative();
        let mut sum = if same_sign {
            wide_big + aligned
        } else {
            wide_big - aligned
        };
        let sign = if sum == 0 && !same_sign {
            0
        } else {
            big.0 & 0x80
        };

        let mut exp = e_big;
        if sum >= 0x80 {
            sum = (sum >> 1) | (sum & 1);
            exp += 1;
        }
        while sum != 0 && sum < 0x40 && exp > EMIN {
            sum <<= 1;
            exp -= 1;
        }
        let grs = sum & 0x07;
        let mut sig = sum >> 3;
        if grs > 4 || (grs == 4 && sig & 1 == 1) {
            sig += 1;
            if sig == 0x10 {
                sig = 0x08;
                exp += 1;
            }
        }
        if exp > MAX_NORMAL_EXP || (exp == MAX_NORMAL_EXP && sig > 0x0e) {
            return Self(sign | Self::MAX.0);
        }
        let bits = if sig >= 0x08 {
            (((exp + BIAS) as u8) << 3) | (sig as u8 & 0x07)
        } else {
            sig as u8
        };
        Self(sign | bits)
    }

    /// All 256 patterns in bit order.
    pub fn all() -> impl Iterator<Item = Self> {
        (0u8..=255).map(Self)
    }
}

/// Bit pattern (sign excluded) for a magnitude already on the E4M3 grid.
fn pack_magnitude(r: f64) -> u8 {
    if r < F8_MIN_NORMAL {
        return (r / F8_MIN_SUBNORMAL) as u8;
    }
    let e = super::grid::exponent_of(r);
    let m = (r / pow2(e) - 1.0) * 8.0;
    (((e + BIAS) as u8) << 3) | (m as u8)
}

impl fmt::Debug for F8E4M3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F8E4M3({:#04x} = {})", self.0, self.decode())
    }
}

impl fmt::Display for F8E4M3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.decode())
    }
}

/// `encode_f8` in free-function form.
#[inline]
pub fn encode_f8(x: f64) -> F8E4M3 {
    F8E4M3::encode(x)
}

#[inline]
pub fn decode_f8(v: F8E4M3) -> f64 {
    v.decode()
}

#[inline]
pub fn add_f8(a: F8E4M3, b: F8E4M3) -> F8E4M3 {
    a.add(b)
}

/// Value after an E4M3 round trip.
#[inline]
pub fn round_f8(x: f64) -> f64 {
    F8E4M3::encode(x).decode()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_encodes_to_positive_zero() {
        assert_eq!(encode_f8(0.0).to_bits(), 0x00);
        assert_eq!(encode_f8(-0.0).to_bits(), 0x80);
    }

    #[test]
    fn format_extremes() {
        assert_eq!(encode_f8(0.015625), F8E4M3::MIN_NORMAL);
        assert_eq!(F8E4M3::MIN_SUBNORMAL.decode(), 2f64.powi(-9));
        assert_eq!(F8E4M3::MIN_NORMAL.decode(), 2f64.powi(-6));
        assert_eq!(F8E4M3::MAX.decode(), 448.0);
        assert_eq!(encode_f8(1000.0).decode(), 448.0);
        assert_eq!(encode_f8(-1000.0).decode(), -448.0);
        assert_eq!(encode_f8(f64::INFINITY).decode(), 448.0);
    }

    #[test]
    fn nan_pattern() {
        let p = F8E4M3::from_bits(0b0_1111_111);
        assert!(p.decode().is_nan());
        assert!(F8E4M3::from_bits(0xff).decode().is_nan());
        assert_eq!(encode_f8(f64::NAN), F8E4M3::NAN);
        // 0b0_1111_110 is the largest finite value, not NaN.
        assert_eq!(F8E4M3::from_bits(0x7e).decode(), 448.0);
    }

    #[test]
    fn sign_symmetry() {
        for p in 0u8..0x7f {
            let pos = F8E4M3::from_bits(p);
            let neg = F8E4M3::from_bits(p | 0x80);
            assert_eq!(neg.decode(), -pos.decode());
        }
    }

    #[test]
    fn addition_examples() {
        let a = encode_f8(16.0);
        assert_eq!(add_f8(a, encode_f8(0.125)).decode(), 16.0);
        assert_eq!(add_f8(encode_f8(1.0), encode_f8(0.125)).decode(), 1.125);
        assert_eq!(add_f8(a, F8E4M3::ZERO), a);
        assert_eq!(add_f8(encode_f8(2.5), encode_f8(-2.5)).to_bits(), 0x00);
        assert!(add_f8(F8E4M3::NAN, a).is_nan());
    }

    #[test]
    fn ties_round_to_even() {
        // 1.0625 sits halfway between 1.0 and 1.125.
        assert_eq!(encode_f8(1.0625).decode(), 1.0);
        // 1.1875 sits halfway between 1.125 and 1.25.
        assert_eq!(encode_f8(1.1875).decode(), 1.25);
        // Half the smallest subnormal ties to zero.
        assert_eq!(encode_f8(2f64.powi(-10)).decode(), 0.0);
        assert_eq!(encode_f8(1.5 * 2f64.powi(-10)).decode(), 2f64.powi(-9));
    }
}
