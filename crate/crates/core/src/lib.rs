// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mixed-precision circuit discovery on small transformers.
//!
//! Edges are scored by activation patching with the edge's source component
//! at full precision while the rest of the model runs on FP8 or BF16 images
//! of the weights. Everything numeric is generic over [`numerics::Scalar`];
//! the aliases below fix it to `f32` or `f64`.

pub mod acdc;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pahq;
pub mod patching;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type WeightSet32 = model::WeightSet<f32>;
pub type WeightSet64 = model::WeightSet<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type ActivationCache32 = model::ActivationCache<f32>;
pub type ActivationCache64 = model::ActivationCache<f64>;
pub type WeightStore32 = pahq::WeightStore<f32>;
pub type WeightStore64 = pahq::WeightStore<f64>;
pub type PlantedTask32 = eval::PlantedTask<f32>;
pub type PlantedTask64 = eval::PlantedTask<f64>;
