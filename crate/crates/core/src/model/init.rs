// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, WeightSet};
use crate::numerics::Scalar;
use crate::tensor::Matrix;

/// Gaussian matrices and biases with standard deviation `std`; layer norms at
/// identity (gain 1, bias 0).
pub fn random_weights<S: Scalar>(config: ModelConfig, seed: u64, std: f64) -> WeightSet<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut sample = |m: &mut [S]| {
        for x in m.iter_mut() {
            *x = S::of(normal.sample(&mut rng));
        }
    };
    let mut set = WeightSet::<S>::zeros(config);
    let fill = |m: &mut Matrix<S>, sample: &mut dyn FnMut(&mut [S])| sample(m.data_mut());
    fill(&mut set.embed, &mut sample);
    fill(&mut set.pos, &mut sample);
    for layer in &mut set.layers {
        fill(&mut layer.w_q, &mut sample);
        fill(&mut layer.w_k, &mut sample);
        fill(&mut layer.w_v, &mut sample);
        fill(&mut layer.w_o, &mut sample);
        if let Some(mlp) = &mut layer.mlp {
            fill(&mut mlp.w_in, &mut sample);
            sample(&mut mlp.b_in);
            fill(&mut mlp.w_out, &mut sample);
            sample(&mut mlp.b_out);
        }
    }
    fill(&mut set.unembed, &mut sample);
    set
}
