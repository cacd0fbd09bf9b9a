// SPDX-License-Identifier: MIT OR Apache-2.0

//! Round-to-nearest quantization onto a uniform integer grid,
//! `Q(w) = delta * round(w / delta)` with `delta = max|w| / 2^(N-1)`.

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

pub const SUPPORTED_BITS: [u32; 3] = [4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub n_bits: u32,
    /// Grid step; 0 for an all-zero group.
    pub delta: f64,
}

/// Quantizes `w` in place semantics (returns a new vector) with one scale for
/// the whole slice. Ties round to even.
pub fn quantize_rtn<S: Scalar>(w: &[S], n_bits: u32) -> Result<(Vec<S>, QuantParams)> {
    if !SUPPORTED_BITS.contains(&n_bits) {
        return Err(Error::UnsupportedBits(n_bits));
    }
    if w.is_empty() {
        return Err(Error::Empty("quantize_rtn input"));
    }
    let max_abs = w.iter().fold(S::zero(), |m, &x| m.max(x.abs()));
    if max_abs == S::zero() {
        return Ok((w.to_vec(), QuantParams { n_bits, delta: 0.0 }));
    }
    let levels = S::of(f64::from(1u32 << (n_bits - 1)));
    let delta = max_abs / levels;
    let q = w
        .iter()
        .map(|&x| delta * S::of((x / delta).as_f64().round_ties_even()))
        .collect();
    Ok((
        q,
        QuantParams {
            n_bits,
            delta: delta.as_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let (q, p) = quantize_rtn(&[1.0f64, -2.0, 0.3], 8).unwrap();
        assert_eq!(p.delta, 0.015625);
        assert_eq!(q[2], 0.296875);
        assert_eq!(q[1], -2.0);
        assert_eq!(q[0], 1.0);
    }

    #[test]
    fn zero_vector_is_fixed() {
        let (q, p) = quantize_rtn(&[0.0f32; 3], 4).unwrap();
        assert_eq!(q, vec![0.0; 3]);
        assert_eq!(p.delta, 0.0);
    }

    #[test]
    fn singleton_is_exact() {
        for x in [0.37f32, -5.0, 1e-3] {
            let (q, _) = quantize_rtn(&[x], 8).unwrap();
            assert_eq!(q, vec![x]);
        }
    }

    #[test]
    fn rejects_unsupported_widths() {
        assert!(matches!(
            quantize_rtn(&[1.0f32], 3),
            Err(Error::UnsupportedBits(3))
        ));
        assert!(quantize_rtn::<f32>(&[], 8).is_err());
    }
}
