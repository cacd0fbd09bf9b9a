// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prefetch plans: while edge `t` is evaluated, the bundle for edge `t+1`'s
//! source is transferred.

use serde::{Deserialize, Serialize};

use super::{target_of, Target};
use crate::model::Edge;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefetchEntry {
    /// 1-based step during which the transfer runs.
    pub step: usize,
    /// Bundle needed at `step + 1`; `None` when that edge elevates nothing.
    pub bundle: Option<Target>,
    /// The bundle is the one step `step` already uses, so nothing moves.
    pub already_resident: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefetchPlan {
    pub entries: Vec<PrefetchEntry>,
}

impl PrefetchPlan {
    /// Entries that actually move weights.
    pub fn loads(&self) -> impl Iterator<Item = &PrefetchEntry> {
        self.entries
            .iter()
            .filter(|e| e.bundle.is_some() && !e.already_resident)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One entry per edge after the first. A bundle shared with the previous
/// edge is marked resident.
pub fn make_prefetch_plan(order: &[Edge]) -> PrefetchPlan {
    let entries = order
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let now = target_of(&w[0]);
            let next = target_of(&w[1]);
            PrefetchEntry {
                step: i + 1,
                bundle: next,
                already_resident: next.is_some() && next == now,
            }
        })
        .collect();
    PrefetchPlan { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NodeId;

    fn head(layer: usize, head: usize) -> NodeId {
        NodeId::Head { layer, head }
    }

    #[test]
    fn single_edge_has_empty_plan() {
        assert!(make_prefetch_plan(&[Edge::new(head(0, 0), NodeId::Unembed)]).is_empty());
        assert!(make_prefetch_plan(&[]).is_empty());
    }

    #[test]
    fn two_sources() {
        let plan = make_prefetch_plan(&[
            Edge::new(head(0, 0), NodeId::Unembed),
            Edge::new(head(0, 1), NodeId::Unembed),
        ]);
        assert_eq!(
            plan.entries,
            vec![PrefetchEntry {
                step: 1,
                bundle: Some(Target::Head { layer: 0, head: 1 }),
                already_resident: false,
            }]
        );
    }

    #[test]
    fn shared_source_is_resident() {
        let plan = make_prefetch_plan(&[
            Edge::new(head(0, 0), NodeId::Unembed),
            Edge::new(head(0, 0), head(1, 0)),
            Edge::new(NodeId::Embed, head(1, 0)),
        ]);
        assert!(plan.entries[0].already_resident);
        assert_eq!(plan.entries[1].bundle, None);
        assert_eq!(plan.loads().count(), 0);
    }
}
