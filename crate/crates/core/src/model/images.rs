// SPDX-License-Identifier: MIT OR Apache-2.0

//! Low-precision images of the weights, built once per precision.

use super::WeightSet;
use crate::numerics::{encode_f8, quantize_rtn, round_slice, Precision, Scalar, F8_MAX};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Q,
    K,
    V,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Q, Component::K, Component::V];

    pub fn name(self) -> &'static str {
        match self {
            Component::Q => "q",
            Component::K => "k",
            Component::V => "v",
        }
    }
}

/// Rounds a weight tensor onto `p` with one scale per tensor. FP8 divides by
/// `max|w| / 448` before encoding and multiplies back after decoding; BF16
/// rounds element-wise; 4-bit uses the RTN integer grid.
pub fn quantize_weight_tensor<S: Scalar>(w: &[S], p: Precision) -> Vec<S> {
    match p {
        Precision::P32 => w.to_vec(),
        Precision::P16 => {
            let mut out = w.to_vec();
            round_slice(&mut out, Precision::P16);
            out
        }
        Precision::P8 => {
            let max_abs = w.iter().fold(0.0f64, |m, x| m.max(x.as_f64().abs()));
            if max_abs == 0.0 {
                return w.to_vec();
            }
            let scale = max_abs / F8_MAX;
            w.iter()
                .map(|x| S::of(encode_f8(x.as_f64() / scale).decode() * scale))
                .collect()
        }
        Precision::P4 => {
            if w.is_empty() {
                return Vec::new();
            }
            quantize_rtn(w, 4).expect("4-bit rtn").0
        }
    }
}

fn quantize_matrix<S: Scalar>(m: &Matrix<S>, p: Precision) -> Matrix<S> {
    Matrix::from_vec(m.rows(), m.cols(), quantize_weight_tensor(m.data(), p)).expect("same shape")
}

#[derive(Debug, Clone)]
pub struct WeightImages<S> {
    pub precision: Precision,
    /// `[layer][head]`, each `d_model x d_k`, quantized per head slice.
    pub q: Vec<Vec<Matrix<S>>>,
    pub k: Vec<Vec<Matrix<S>>>,
    pub v: Vec<Vec<Matrix<S>>>,
    /// `[layer][head]`, each `d_k x d_model`: row blocks of the per-layer `W_O` image.
    pub o: Vec<Vec<Matrix<S>>>,
    pub mlp_in: Vec<Option<Matrix<S>>>,
    pub mlp_out: Vec<Option<Matrix<S>>>,
    pub unembed: Matrix<S>,
}

impl<S: Scalar> WeightImages<S> {
    pub fn build(w: &WeightSet<S>, p: Precision) -> Self {
        let c = &w.config;
        let dk = c.d_k;
        let head_slices = |m: &Matrix<S>| -> Vec<Matrix<S>> {
            (0..c.n_heads)
                .map(|h| quantize_matrix(&m.col_slice(h * dk, (h + 1) * dk), p))
                .collect()
        };
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut o = Vec::new();
        let mut mlp_in = Vec::new();
        let mut mlp_out = Vec::new();
        for layer in &w.layers {
            q.push(head_slices(&layer.w_q));
            k.push(head_slices(&layer.w_k));
            v.push(head_slices(&layer.w_v));
            let o_img = quantize_matrix(&layer.w_o, p);
            o.push((0..c.n_heads).map(|h| o_img.row_slice(h * dk, (h + 1) * dk)).collect());
            mlp_in.push(layer.mlp.as_ref().map(|m| quantize_matrix(&m.w_in, p)));
            mlp_out.push(layer.mlp.as_ref().map(|m| quantize_matrix(&m.w_out, p)));
        }
        Self {
            precision: p,
            q,
            k,
            v,
            o,
            mlp_in,
            mlp_out,
            unembed: quantize_matrix(&w.unembed, p),
        }
    }

    pub fn qkv(&self, comp: Component, layer: usize, head: usize) -> &Matrix<S> {
        match comp {
            Component::Q => &self.q[layer][head],
            Component::K => &self.k[layer][head],
            Component::V => &self.v[layer][head],
        }
    }
}

/// First `ceil(tenths/10 * n)` elements (row-major) taken from `low`, the
/// rest from `high`.
pub fn blend_prefix<S: Scalar>(high: &Matrix<S>, low: &Matrix<S>, tenths: u8) -> Matrix<S> {
    let n = high.data().len();
    let k = (n * usize::from(tenths.min(10))).div_ceil(10);
    let mut out = high.clone();
    out.data_mut()[..k].copy_from_slice(&low.data()[..k]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fp8_image_keeps_the_max_exact() {
        let w = [0.1f32, -0.37, 0.0021, 0.37];
        let q = quantize_weight_tensor(&w, Precision::P8);
        assert_eq!(q[1], -0.37);
        assert_eq!(q[3], 0.37);
        for (a, b) in w.iter().zip(&q) {
            assert!((a - b).abs() <= a.abs() / 16.0 + 1e-9);
        }
    }

    #[test]
    fn blend_counts() {
        let hi = Matrix::from_vec(2, 5, vec![1.0f32; 10]).unwrap();
        let lo = Matrix::from_vec(2, 5, vec![0.0f32; 10]).unwrap();
        assert_eq!(blend_prefix(&hi, &lo, 0).data().iter().sum::<f32>(), 10.0);
        assert_eq!(blend_prefix(&hi, &lo, 3).data().iter().sum::<f32>(), 7.0);
        assert_eq!(blend_prefix(&hi, &lo, 10).data().iter().sum::<f32>(), 0.0);
    }
}
