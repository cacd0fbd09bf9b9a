// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer as an explicit edge-level graph.

mod config;
mod forward;
mod graph;
pub mod images;
pub mod init;
pub mod io;
mod weights;

pub use config::ModelConfig;
pub use forward::{
    aggregate, causal_attention, forward, forward_reusing, gelu, layer_norm, linear,
    ActivationCache, AttentionOut, EdgePatch, Model, Tokens, LN_EPS,
};
pub use graph::{is_residual_edge, ComputationalGraph, Edge, NodeId};
pub use images::{Component, WeightImages};
pub use io::{decode_weights, encode_weights, load_weights, save_weights};
pub use weights::{LayerWeights, MlpWeights, WeightSet};
