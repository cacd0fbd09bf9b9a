// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge-level computational graph over the residual stream.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeId {
    Embed,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Unembed,
}

impl NodeId {
    fn key(&self) -> (u8, usize, u8, usize) {
        match *self {
            NodeId::Embed => (0, 0, 0, 0),
            NodeId::Head { layer, head } => (1, layer, 0, head),
            NodeId::Mlp { layer } => (1, layer, 1, 0),
            NodeId::Unembed => (2, 0, 0, 0),
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, NodeId::Head { .. })
    }

    pub fn as_head(&self) -> Option<(usize, usize)> {
        match *self {
            NodeId::Head { layer, head } => Some((layer, head)),
            _ => None,
        }
    }
}

impl PartialOrd for NodeId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Topological order: embed, then per layer its heads followed by its MLP,
/// then unembed.
impl Ord for NodeId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Embed => f.write_str("embed"),
            NodeId::Head { layer, head } => write!(f, "a{layer}.{head}"),
            NodeId::Mlp { layer } => write!(f, "m{layer}"),
            NodeId::Unembed => f.write_str("unembed"),
        }
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || format!("bad node id `{s}`");
        match s {
            "embed" => Ok(NodeId::Embed),
            "unembed" => Ok(NodeId::Unembed),
            _ if s.starts_with('a') => {
                let (l, h) = s[1..].split_once('.').ok_or_else(bad)?;
                Ok(NodeId::Head {
                    layer: l.parse().map_err(|_| bad())?,
                    head: h.parse().map_err(|_| bad())?,
                })
            }
            _ if s.starts_with('m') => Ok(NodeId::Mlp {
                layer: s[1..].parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
}

impl Edge {
    pub fn new(src: NodeId, dst: NodeId) -> Self {
        Self { src, dst }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.dst)
    }
}

impl FromStr for Edge {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (a, b) = s.split_once("->").ok_or_else(|| format!("bad edge `{s}`"))?;
        Ok(Edge::new(a.trim().parse()?, b.trim().parse()?))
    }
}

/// Whether `src` writes into `dst`'s input in the residual decomposition.
pub fn is_residual_edge(src: NodeId, dst: NodeId) -> bool {
    if src == NodeId::Unembed || dst == NodeId::Embed || src >= dst {
        return false;
    }
    match (src, dst) {
        (NodeId::Head { layer: a, .. }, NodeId::Head { layer: b, .. }) => a < b,
        (NodeId::Mlp { layer: a }, NodeId::Head { layer: b, .. }) => a < b,
        _ => true,
    }
}

/// The full graph `G` plus a presence mask selecting the current circuit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputationalGraph {
    config: ModelConfig,
    nodes: Vec<NodeId>,
    edges: Vec<Edge>,
    present: Vec<bool>,
    index: HashMap<Edge, usize>,
}

impl ComputationalGraph {
    /// Every residual edge present.
    pub fn full(config: ModelConfig) -> Self {
        let mut nodes = vec![NodeId::Embed];
        for layer in 0..config.n_layers {
            nodes.extend((0..config.n_heads).map(|head| NodeId::Head { layer, head }));
            if config.has_mlp() {
                nodes.push(NodeId::Mlp { layer });
            }
        }
        nodes.push(NodeId::Unembed);

        let mut edges = Vec::new();
        for &dst in &nodes {
            for &src in &nodes {
                if is_residual_edge(src, dst) {
                    edges.push(Edge::new(src, dst));
                }
            }
        }
        let index = edges.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        let present = vec![true; edges.len()];
        Self {
            config,
            nodes,
            edges,
            present,
            index,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Nodes in topological order.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn node_index(&self, node: NodeId) -> Option<usize> {
        self.nodes.binary_search(&node).ok()
    }

    /// All edges of `G`, present or not, grouped by destination in topological order.
    pub fn all_edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn contains(&self, edge: &Edge) -> bool {
        self.index.contains_key(edge)
    }

    pub fn is_present(&self, edge: &Edge) -> bool {
        self.index.get(edge).is_some_and(|&i| self.present[i])
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn present_edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges
            .iter()
            .zip(&self.present)
            .filter_map(|(e, &p)| p.then_some(*e))
    }

    /// Present edges into `dst`, sources in topological order.
    pub fn incoming(&self, dst: NodeId) -> impl Iterator<Item = Edge> + '_ {
        self.present_edges().filter(move |e| e.dst == dst)
    }

    /// Removes an edge from the mask. Edges outside `G` are rejected.
    pub fn remove(&mut self, edge: &Edge) -> Result<bool> {
        let &i = self
            .index
            .get(edge)
            .ok_or_else(|| Error::InvalidArgument(format!("edge {edge} is not in G")))?;
        Ok(std::mem::replace(&mut self.present[i], false))
    }

    /// Restricts the mask to `keep` (intersected with `G`).
    pub fn with_mask<'a>(&self, keep: impl IntoIterator<Item = &'a Edge>) -> Self {
        let mut g = self.clone();
        g.present.iter_mut().for_each(|p| *p = false);
        for e in keep {
            if let Some(&i) = g.index.get(e) {
                g.present[i] = true;
            }
        }
        g
    }

    pub fn mask(&self) -> &[bool] {
        &self.present
    }

    /// ACDC sweep order: destinations in reverse topological order, sources
    /// ascending within a destination. Only present edges.
    pub fn enumerate_edges(&self) -> Vec<Edge> {
        let mut out: Vec<Edge> = self.present_edges().collect();
        out.sort_by(|a, b| b.dst.cmp(&a.dst).then(a.src.cmp(&b.src)));
        out
    }
}
