// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{bf16::round_bf16, f8::round_f8, Scalar};

/// Compute precision of a component. Ordered by representational fidelity.
///
/// `P4` is the 4-bit integer-grid RTN mode (per-tensor scale); there is no
/// packed 4-bit float format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Precision {
    P4,
    P8,
    P16,
    P32,
}

impl Precision {
    pub const ALL: [Precision; 4] = [Precision::P4, Precision::P8, Precision::P16, Precision::P32];

    pub fn bits(self) -> u32 {
        match self {
            Precision::P4 => 4,
            Precision::P8 => 8,
            Precision::P16 => 16,
            Precision::P32 => 32,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            4 => Some(Precision::P4),
            8 => Some(Precision::P8),
            16 => Some(Precision::P16),
            32 => Some(Precision::P32),
            _ => None,
        }
    }

    /// Bytes per stored weight element.
    pub fn weight_bytes(self) -> f64 {
        f64::from(self.bits()) / 8.0
    }

    /// Whether values can be rounded one element at a time (no tensor scale).
    pub fn is_elementwise(self) -> bool {
        !matches!(self, Precision::P4)
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::P4 => "int4",
            Precision::P8 => "fp8_e4m3",
            Precision::P16 => "bf16",
            Precision::P32 => "fp32",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "4" | "int4" => Ok(Precision::P4),
            "8" | "fp8" | "fp8_e4m3" => Ok(Precision::P8),
            "16" | "bf16" => Ok(Precision::P16),
            "32" | "fp32" => Ok(Precision::P32),
            other => Err(format!("unknown precision `{other}`")),
        }
    }
}

/// Smallest positive normal magnitude of the format. For `P4` this is the
/// grid step at unit scale, 2^-3.
pub fn step_size(p: Precision) -> f64 {
    match p {
        Precision::P4 => 0.125,
        Precision::P8 => super::f8::F8_MIN_NORMAL,
        Precision::P16 | Precision::P32 => f64::from(f32::MIN_POSITIVE),
    }
}

/// Rounds one value to an element-wise format. `P32` is the native scalar.
#[inline]
pub fn round_scalar<S: Scalar>(x: S, p: Precision) -> S {
    match p {
        Precision::P32 => x,
        Precision::P16 => S::of(round_bf16(x.as_f64())),
        Precision::P8 => S::of(round_f8(x.as_f64())),
        Precision::P4 => panic!("int4 rounding needs a tensor scale; use round_slice"),
    }
}

/// Rounds a whole tensor. Element-wise formats round each value; `P4` uses
/// one RTN scale for the slice.
pub fn round_slice<S: Scalar>(xs: &mut [S], p: Precision) {
    match p {
        Precision::P32 => {}
        Precision::P4 => {
            if xs.is_empty() {
                return;
            }
            // Width 4 is supported, so this cannot fail.
            let (q, _) = super::rtn::quantize_rtn(xs, 4).expect("4-bit rtn");
            xs.copy_from_slice(&q);
        }
        _ => {
            for x in xs.iter_mut() {
                *x = round_scalar(*x, p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fidelity_order() {
        assert!(Precision::P8 < Precision::P16);
        assert!(Precision::P16 < Precision::P32);
        assert!(Precision::P4 < Precision::P8);
    }

    #[test]
    fn step_sizes() {
        assert_eq!(step_size(Precision::P8), 2f64.powi(-6));
        assert_eq!(step_size(Precision::P32), 2f64.powi(-126));
        assert_eq!(step_size(Precision::P16), 2f64.powi(-126));
    }

    #[test]
    fn parse_and_display() {
        for p in Precision::ALL {
            assert_eq!(p.to_string().parse::<Precision>().unwrap(), p);
            assert_eq!(Precision::from_bits(p.bits()), Some(p));
        }
        assert!("fp6".parse::<Precision>().is_err());
    }
}
