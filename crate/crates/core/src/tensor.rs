// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major matrices. Activations are stored as `(batch * seq) x features`.

use crate::error::{Error, Result};
use crate::numerics::{bitwise_eq, round_slice, Precision, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self @ rhs`, accumulating each output in ascending `k` order.
    pub fn matmul(&self, rhs: &Matrix<S>) -> Matrix<S> {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul {}x{} @ {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let w_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &w) in o_row.iter_mut().zip(w_row) {
                    *o += a * w;
                }
            }
        }
        out
    }

    /// Columns `[start, end)`.
    pub fn col_slice(&self, start: usize, end: usize) -> Matrix<S> {
        assert!(start <= end && end <= self.cols);
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    /// Rows `[start, end)`.
    pub fn row_slice(&self, start: usize, end: usize) -> Matrix<S> {
        assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn add_assign(&mut self, rhs: &Matrix<S>) {
        assert_eq!(self.shape(), rhs.shape());
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn sub(&self, rhs: &Matrix<S>) -> Matrix<S> {
        assert_eq!(self.shape(), rhs.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn scale(&mut self, k: S) {
        for x in &mut self.data {
            *x *= k;
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Matrix<S> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Copy rounded to `p` (per-tensor scale for `P4`).
    pub fn rounded(&self, p: Precision) -> Matrix<S> {
        let mut out = self.clone();
        round_slice(&mut out.data, p);
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn bitwise_eq(&self, other: &Matrix<S>) -> bool {
        self.shape() == other.shape() && bitwise_eq(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| T::of(x.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_vec(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn slices() {
        let a = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        assert_eq!(a.col_slice(1, 3).data(), &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0]);
        assert_eq!(a.row_slice(2, 3).data(), &[8.0, 9.0, 10.0, 11.0]);
        assert!(Matrix::<f32>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
