// SPDX-License-Identifier: MIT OR Apache-2.0

//! Time-dependent precision allocation: the source component of the edge under
//! evaluation runs at FP32, every other attention head at the low attention
//! precision, non-attention components at BF16.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Edge, NodeId};
use crate::numerics::Precision;

/// Component elevated to FP32 for one edge evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
}

impl Target {
    pub fn node(self) -> NodeId {
        match self {
            Target::Head { layer, head } => NodeId::Head { layer, head },
            Target::Mlp { layer } => NodeId::Mlp { layer },
        }
    }

    pub fn head(self) -> Option<(usize, usize)> {
        match self {
            Target::Head { layer, head } => Some((layer, head)),
            Target::Mlp { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub target: Option<Target>,
    /// Default for attention heads.
    pub attention: Precision,
    /// Default for MLPs and the unembedding.
    pub non_attention: Precision,
    /// Precision of the residual sums that form each node's input.
    pub residual: Precision,
    /// Per-node precisions that win over the defaults (but not over the target).
    pub overrides: BTreeMap<NodeId, Precision>,
    /// Heads whose weights are partly replaced by their FP8 image, in tenths
    /// of the elements of each of the head's weight slices.
    pub partial_fp8: BTreeMap<(usize, usize), u8>,
}

impl PrecisionPolicy {
    /// Everything native: plain ACDC.
    pub fn full_precision() -> Self {
        Self::uniform(Precision::P32)
    }

    /// One precision for every component and for the residual sums (RTN mode
    /// when `p = P8`).
    pub fn uniform(p: Precision) -> Self {
        Self {
            target: None,
            attention: p,
            non_attention: p,
            residual: p,
            overrides: BTreeMap::new(),
            partial_fp8: BTreeMap::new(),
        }
    }

    /// The mixed-precision baseline without a target: heads at FP8,
    /// non-attention at BF16, residual sums at FP32.
    pub fn pahq_base() -> Self {
        Self::pahq_with(Precision::P8, Precision::P16)
    }

    pub fn pahq_with(attention: Precision, non_attention: Precision) -> Self {
        Self {
            target: None,
            attention,
            non_attention,
            residual: Precision::P32,
            overrides: BTreeMap::new(),
            partial_fp8: BTreeMap::new(),
        }
    }

    pub fn with_target(mut self, target: Option<Target>) -> Self {
        self.target = target;
        self
    }

    pub fn with_override(mut self, node: NodeId, p: Precision) -> Self {
        self.overrides.insert(node, p);
        self
    }

    /// Precision a node computes at. Embeddings are always FP32; layer norms
    /// are FP32 inside every component.
    pub fn node_precision(&self, node: NodeId) -> Precision {
        if node == NodeId::Embed {
            return Precision::P32;
        }
        if self.target.is_some_and(|t| t.node() == node) {
            return Precision::P32;
        }
        self.base_precision(node)
    }

    /// Precision a node would get if it were not the target.
    pub fn base_precision(&self, node: NodeId) -> Precision {
        if node == NodeId::Embed {
            return Precision::P32;
        }
        if let Some(&p) = self.overrides.get(&node) {
            return p;
        }
        match node {
            NodeId::Head { .. } => self.attention,
            NodeId::Mlp { .. } | NodeId::Unembed => self.non_attention,
            NodeId::Embed => Precision::P32,
        }
    }

    /// Precision of head `(layer, head)`'s output projection. A target head
    /// brings its whole layer's `W_O` up to FP32.
    pub fn output_precision(&self, layer: usize, head: usize) -> Precision {
        match self.target {
            Some(Target::Head { layer: l, .. }) if l == layer => Precision::P32,
            _ => self.node_precision(NodeId::Head { layer, head }),
        }
    }

    pub fn target_head(&self) -> Option<(usize, usize)> {
        self.target.and_then(Target::head)
    }

    pub fn partial_tenths(&self, layer: usize, head: usize) -> u8 {
        self.partial_fp8.get(&(layer, head)).copied().unwrap_or(0)
    }
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self::full_precision()
    }
}

impl fmt::Display for PrecisionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "attn={} non_attn={} residual={}",
            self.attention, self.non_attention, self.residual
        )?;
        if let Some(t) = self.target {
            write!(f, " target={}", t.node())?;
        }
        Ok(())
    }
}

/// PAHQ policy for one edge: the edge's source head (or MLP) is elevated to
/// FP32, other heads stay at FP8 and non-attention components at BF16. An
/// embedding source elevates nothing.
pub fn policy_for_edge(edge: &Edge) -> PrecisionPolicy {
    PrecisionPolicy::pahq_base().with_target(target_of(edge))
}

pub fn target_of(edge: &Edge) -> Option<Target> {
    match edge.src {
        NodeId::Head { layer, head } => Some(Target::Head { layer, head }),
        NodeId::Mlp { layer } => Some(Target::Mlp { layer }),
        NodeId::Embed | NodeId::Unembed => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_head_is_the_only_fp32_head() {
        let src = NodeId::Head { layer: 1, head: 3 };
        let p = policy_for_edge(&Edge::new(src, NodeId::Unembed));
        assert_eq!(p.target, Some(Target::Head { layer: 1, head: 3 }));
        assert_eq!(p.node_precision(src), Precision::P32);
        for layer in 0..3 {
            for head in 0..4 {
                let n = NodeId::Head { layer, head };
                if n != src {
                    assert_eq!(p.node_precision(n), Precision::P8);
                }
            }
            assert_eq!(p.node_precision(NodeId::Mlp { layer }), Precision::P16);
        }
        assert_eq!(p.node_precision(NodeId::Unembed), Precision::P16);
        assert_eq!(p.node_precision(NodeId::Embed), Precision::P32);
        assert_eq!(p.output_precision(1, 0), Precision::P32);
        assert_eq!(p.output_precision(0, 0), Precision::P8);
    }

    #[test]
    fn depends_on_source_only() {
        let src = NodeId::Head { layer: 0, head: 1 };
        let a = policy_for_edge(&Edge::new(src, NodeId::Unembed));
        let b = policy_for_edge(&Edge::new(src, NodeId::Head { layer: 2, head: 0 }));
        assert_eq!(a, b);
    }

    #[test]
    fn embed_source_elevates_nothing() {
        let p = policy_for_edge(&Edge::new(NodeId::Embed, NodeId::Unembed));
        assert_eq!(p.target, None);
        assert_eq!(p.node_precision(NodeId::Head { layer: 0, head: 0 }), Precision::P8);
    }

    #[test]
    fn mlp_source_elevates_the_mlp() {
        let p = policy_for_edge(&Edge::new(NodeId::Mlp { layer: 0 }, NodeId::Unembed));
        assert_eq!(p.node_precision(NodeId::Mlp { layer: 0 }), Precision::P32);
        assert_eq!(p.node_precision(NodeId::Mlp { layer: 1 }), Precision::P16);
        assert_eq!(p.output_precision(0, 0), Precision::P8);
    }
}
