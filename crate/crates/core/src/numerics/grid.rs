// SPDX-License-Identifier: MIT OR Apache-2.0

//! Round-to-nearest-even onto a binary floating-point grid, evaluated in f64.

/// Unbiased binary exponent of a positive finite f64 (floor(log2 a)).
#[inline]
pub(crate) fn exponent_of(a: f64) -> i32 {
    let raw = ((a.to_bits() >> 52) & 0x7ff) as i32;
    if raw == 0 {
        // f64 subnormal; every format here clamps far above this.
        -1023
    } else {
        raw - 1023
    }
}

/// Rounds `a > 0` to the grid of a format with `mant_bits` explicit mantissa
/// bits and minimum normal exponent `emin`. No overflow handling.
#[inline]
pub(crate) fn round_magnitude(a: f64, mant_bits: i32, emin: i32) -> f64 {
    let e = exponent_of(a).max(emin);
    let quantum = pow2(e - mant_bits);
    (a / quantum).round_ties_even() * quantum
}

#[inline]
pub(crate) fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}
