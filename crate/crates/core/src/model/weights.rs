// SPDX-License-Identifier: MIT OR Apache-2.0

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights<S> {
    pub ln_gamma: Vec<S>,
    pub ln_beta: Vec<S>,
    /// d_model x d_mlp
    pub w_in: Matrix<S>,
    pub b_in: Vec<S>,
    /// d_mlp x d_model
    pub w_out: Matrix<S>,
    pub b_out: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S> {
    pub ln_gamma: Vec<S>,
    pub ln_beta: Vec<S>,
    /// d_model x d_model; head `h` owns columns `h*d_k .. (h+1)*d_k`.
    pub w_q: Matrix<S>,
    pub w_k: Matrix<S>,
    pub w_v: Matrix<S>,
    /// d_model x d_model; head `h` owns rows `h*d_k .. (h+1)*d_k`.
    pub w_o: Matrix<S>,
    pub mlp: Option<MlpWeights<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<S> {
    pub config: ModelConfig,
    /// vocab x d_model
    pub embed: Matrix<S>,
    /// seq_len x d_model
    pub pos: Matrix<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub ln_f_gamma: Vec<S>,
    pub ln_f_beta: Vec<S>,
    /// d_model x vocab
    pub unembed: Matrix<S>,
}

impl<S: Scalar> WeightSet<S> {
    /// All-zero weights with unit layer-norm gains.
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.d_model;
        let ones = || vec![S::one(); d];
        let zeros = |n: usize| vec![S::zero(); n];
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln_gamma: ones(),
                ln_beta: zeros(d),
                w_q: Matrix::zeros(d, d),
                w_k: Matrix::zeros(d, d),
                w_v: Matrix::zeros(d, d),
                w_o: Matrix::zeros(d, d),
                mlp: config.has_mlp().then(|| MlpWeights {
                    ln_gamma: ones(),
                    ln_beta: zeros(d),
                    w_in: Matrix::zeros(d, config.d_mlp),
                    b_in: zeros(config.d_mlp),
                    w_out: Matrix::zeros(config.d_mlp, d),
                    b_out: zeros(d),
                }),
            })
            .collect();
        Self {
            config,
            embed: Matrix::zeros(config.vocab, d),
            pos: Matrix::zeros(config.seq_len, d),
            layers,
            ln_f_gamma: ones(),
            ln_f_beta: zeros(d),
            unembed: Matrix::zeros(d, config.vocab),
        }
    }

    /// Visits every tensor in weight-file order.
    pub fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(&'a [S])) {
        f(self.embed.data());
        f(self.pos.data());
        for layer in &self.layers {
            f(&layer.ln_gamma);
            f(&layer.ln_beta);
            f(layer.w_q.data());
            f(layer.w_k.data());
            f(layer.w_v.data());
            f(layer.w_o.data());
            if let Some(m) = &layer.mlp {
                f(&m.ln_gamma);
                f(&m.ln_beta);
                f(m.w_in.data());
                f(&m.b_in);
                f(m.w_out.data());
                f(&m.b_out);
            }
        }
        f(&self.ln_f_gamma);
        f(&self.ln_f_beta);
        f(self.unembed.data());
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [S])) {
        f(self.embed.data_mut());
        f(self.pos.data_mut());
        for layer in &mut self.layers {
            f(&mut layer.ln_gamma);
            f(&mut layer.ln_beta);
            f(layer.w_q.data_mut());
            f(layer.w_k.data_mut());
            f(layer.w_v.data_mut());
            f(layer.w_o.data_mut());
            if let Some(m) = &mut layer.mlp {
                f(&mut m.ln_gamma);
                f(&mut m.ln_beta);
                f(m.w_in.data_mut());
                f(&mut m.b_in);
                f(m.w_out.data_mut());
                f(&mut m.b_out);
            }
        }
        f(&mut self.ln_f_gamma);
        f(&mut self.ln_f_beta);
        f(self.unembed.data_mut());
    }

    pub fn element_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|t| n += t.len());
        n
    }

    /// Shape and finiteness checks against `config`.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let mut problems: Vec<String> = Vec::new();
        fn expect(problems: &mut Vec<String>, name: String, got: (usize, usize), want: (usize, usize)) {
            if got != want {
                problems.push(format!("{name}: {got:?}, expected {want:?}"));
            }
        }
        expect(&mut problems, "embed".into(), self.embed.shape(), (c.vocab, d));
        expect(&mut problems, "pos".into(), self.pos.shape(), (c.seq_len, d));
        expect(&mut problems, "unembed".into(), self.unembed.shape(), (d, c.vocab));
        expect(&mut problems, "ln_f".into(), (self.ln_f_gamma.len(), self.ln_f_beta.len()), (d, d));
        expect(&mut problems, "layers".into(), (self.layers.len(), 0), (c.n_layers, 0));
        for (l, layer) in self.layers.iter().enumerate() {
            expect(&mut problems, format!("layer {l} ln"), (layer.ln_gamma.len(), layer.ln_beta.len()), (d, d));
            for (name, m) in [("w_q", &layer.w_q), ("w_k", &layer.w_k), ("w_v", &layer.w_v), ("w_o", &layer.w_o)] {
                expect(&mut problems, format!("layer {l} {name}"), m.shape(), (d, d));
            }
            match (&layer.mlp, c.has_mlp()) {
                (Some(m), true) => {
                    expect(&mut problems, format!("layer {l} w_in"), m.w_in.shape(), (d, c.d_mlp));
                    expect(&mut problems, format!("layer {l} w_out"), m.w_out.shape(), (c.d_mlp, d));
                    expect(&mut problems, format!("layer {l} mlp biases"), (m.b_in.len(), m.b_out.len()), (c.d_mlp, d));
                    expect(&mut problems, format!("layer {l} mlp ln"), (m.ln_gamma.len(), m.ln_beta.len()), (d, d));
                }
                (None, false) => {}
                _ => problems.push(format!("layer {l}: mlp presence disagrees with d_mlp")),
            }
        }
        let mut finite = true;
        self.for_each_tensor(|t| finite &= t.iter().all(|x| x.is_finite()));
        if !finite {
            problems.push("non-finite weight".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Shape(problems.join("; ")))
        }
    }

    pub fn cast<T: Scalar>(&self) -> WeightSet<T> {
        let v = |x: &Vec<S>| x.iter().map(|s| T::of(s.as_f64())).collect::<Vec<T>>();
        WeightSet {
            config: self.config,
            embed: self.embed.cast(),
            pos: self.pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln_gamma: v(&l.ln_gamma),
                    ln_beta: v(&l.ln_beta),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    mlp: l.mlp.as_ref().map(|m| MlpWeights {
                        ln_gamma: v(&m.ln_gamma),
                        ln_beta: v(&m.ln_beta),
                        w_in: m.w_in.cast(),
                        b_in: v(&m.b_in),
                        w_out: m.w_out.cast(),
                        b_out: v(&m.b_out),
                    }),
                })
                .collect(),
            ln_f_gamma: v(&self.ln_f_gamma),
            ln_f_beta: v(&self.ln_f_beta),
            unembed: self.unembed.cast(),
        }
    }

    /// Bitwise equality across every tensor.
    pub fn bitwise_eq(&self, other: &WeightSet<S>) -> bool {
        if self.config != other.config {
            return false;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.for_each_tensor(|t| a.push(t));
        other.for_each_tensor(|t| b.push(t));
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| crate::numerics::bitwise_eq(x, y))
    }
}
