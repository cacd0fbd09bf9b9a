// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mixed-precision attention assembly. Per-head activations are laid out
//! head-major along the feature axis: rows are `batch * seq`, head `h` owns
//! columns `h*d_k .. (h+1)*d_k`.

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::tensor::Matrix;

/// Slice `target` comes verbatim from `high`; every other slice is the
/// low-precision value widened to the native scalar (already exact, since
/// low-precision values are stored decoded).
pub fn mixed_assembly<S: Scalar>(
    low: &Matrix<S>,
    high: &Matrix<S>,
    target: usize,
    n_heads: usize,
) -> Result<Matrix<S>> {
    if n_heads == 0 || !low.cols().is_multiple_of(n_heads) {
        return Err(Error::Shape(format!(
            "{} columns do not split into {n_heads} heads",
            low.cols()
        )));
    }
    let dk = low.cols() / n_heads;
    if target >= n_heads {
        return Err(Error::Shape(format!("target head {target} >= {n_heads} heads")));
    }
    if high.shape() != (low.rows(), dk) {
        return Err(Error::Shape(format!(
            "high-precision slice is {:?}, expected {:?}",
            high.shape(),
            (low.rows(), dk)
        )));
    }
    let mut out = low.clone();
    for r in 0..low.rows() {
        out.row_mut(r)[target * dk..(target + 1) * dk].copy_from_slice(high.row(r));
    }
    Ok(out)
}

/// Head-major concatenation along the feature axis.
pub fn concat_heads<S: Scalar>(heads: &[Matrix<S>]) -> Result<Matrix<S>> {
    let Some(first) = heads.first() else {
        return Err(Error::Empty("head list"));
    };
    let (rows, dk) = first.shape();
    if heads.iter().any(|h| h.shape() != (rows, dk)) {
        return Err(Error::Shape("heads have different shapes".into()));
    }
    let mut out = Matrix::zeros(rows, dk * heads.len());
    for r in 0..rows {
        let dst = out.row_mut(r);
        for (h, m) in heads.iter().enumerate() {
            dst[h * dk..(h + 1) * dk].copy_from_slice(m.row(r));
        }
    }
    Ok(out)
}

/// Inverse of [`concat_heads`].
pub fn split_heads<S: Scalar>(m: &Matrix<S>, n_heads: usize) -> Result<Vec<Matrix<S>>> {
    if n_heads == 0 || !m.cols().is_multiple_of(n_heads) {
        return Err(Error::Shape(format!(
            "{} columns do not split into {n_heads} heads",
            m.cols()
        )));
    }
    let dk = m.cols() / n_heads;
    Ok((0..n_heads).map(|h| m.col_slice(h * dk, (h + 1) * dk)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, cols: usize, offset: f32) -> Matrix<f32> {
        Matrix::from_fn(rows, cols, |r, c| offset + (r * cols + c) as f32)
    }

    #[test]
    fn single_head_takes_high() {
        let low = ramp(3, 4, 0.0);
        let high = ramp(3, 4, 100.0);
        let out = mixed_assembly(&low, &high, 0, 1).unwrap();
        assert!(out.bitwise_eq(&high));
    }

    #[test]
    fn zero_low_keeps_only_target_slice() {
        let low = Matrix::<f32>::zeros(2, 8);
        let high = ramp(2, 2, 1.0);
        let out = mixed_assembly(&low, &high, 2, 4).unwrap();
        let parts = split_heads(&out, 4).unwrap();
        assert!(parts[2].bitwise_eq(&high));
        for h in [0, 1, 3] {
            assert!(parts[h].data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn shape_errors() {
        let low = Matrix::<f32>::zeros(2, 8);
        assert!(mixed_assembly(&low, &Matrix::zeros(2, 3), 0, 4).is_err());
        assert!(mixed_assembly(&low, &Matrix::zeros(2, 2), 4, 4).is_err());
        assert!(mixed_assembly(&low, &Matrix::zeros(2, 2), 0, 3).is_err());
    }

    #[test]
    fn split_then_concat_is_identity() {
        let m = ramp(5, 12, 0.5);
        for h in [1, 2, 3, 4, 6] {
            let back = concat_heads(&split_heads(&m, h).unwrap()).unwrap();
            assert!(back.bitwise_eq(&m));
        }
    }

    #[test]
    fn permuting_heads_permutes_blocks() {
        let heads: Vec<_> = (0..3).map(|h| ramp(2, 2, 10.0 * h as f32)).collect();
        let perm = [2, 0, 1];
        let shuffled: Vec<_> = perm.iter().map(|&i| heads[i].clone()).collect();
        let out = split_heads(&concat_heads(&shuffled).unwrap(), 3).unwrap();
        for (pos, &src) in perm.iter().enumerate() {
            assert!(out[pos].bitwise_eq(&heads[src]));
        }
    }
}
