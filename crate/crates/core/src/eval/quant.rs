// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::planted::{accuracy, PlantedTask};
use super::roc::{roc_sweep, RocPoint};
use crate::acdc::{high_precision_heads, run_acdc, PahqProvider, PruneConfig};
use crate::error::{Error, Result};
use crate::model::{ComputationalGraph, NodeId};
use crate::numerics::{Precision, Scalar};
use crate::pahq::PrecisionPolicy;

/// One point of the incremental quantization curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantStep {
    /// 0 for the baseline, then 1 or 2.
    pub phase: u8,
    pub head: Option<String>,
    /// Tenths of the head's weights on the FP8 image.
    pub tenths: u8,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantCurve {
    pub critical: Vec<String>,
    pub steps: Vec<QuantStep>,
}

impl QuantCurve {
    pub fn baseline(&self) -> f64 {
        self.steps.first().map_or(0.0, |s| s.accuracy)
    }

    /// Largest fall below the baseline during `phase`.
    pub fn max_drop(&self, phase: u8) -> f64 {
        let base = self.baseline();
        self.steps
            .iter()
            .filter(|s| s.phase == phase)
            .map(|s| base - s.accuracy)
            .fold(0.0, f64::max)
    }
}

fn reverse_topological(heads: impl IntoIterator<Item = (usize, usize)>) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = heads.into_iter().collect();
    v.sort_by(|a, b| b.cmp(a));
    v
}

/// Accuracy of the circuit while heads move to FP8. Phase 1 switches the
/// non-critical heads over one at a time, latest first. Phase 2 then moves
/// each critical head's weights onto the FP8 image a tenth at a time; the
/// last step runs the head fully at FP8.
pub fn incremental_quant_sweep<S: Scalar>(task: &PlantedTask<S>, circuit: &ComputationalGraph) -> Result<QuantCurve> {
    let c = task.config();
    if circuit.config() != c {
        return Err(Error::Shape("circuit and task disagree on the model config".into()));
    }
    let critical: BTreeSet<(usize, usize)> = high_precision_heads(circuit);
    let all = (0..c.n_layers).flat_map(|l| (0..c.n_heads).map(move |h| (l, h)));
    let rest = reverse_topological(all.filter(|h| !critical.contains(h)));
    let name = |(layer, head): (usize, usize)| NodeId::Head { layer, head }.to_string();
    let acc = |p: &PrecisionPolicy| accuracy(circuit, &task.model, &task.dataset, p);

    let mut policy = PrecisionPolicy::full_precision();
    let mut steps = vec![QuantStep { phase: 0, head: None, tenths: 0, accuracy: acc(&policy)? }];
    for h in rest {
        policy = policy.with_override(NodeId::Head { layer: h.0, head: h.1 }, Precision::P8);
        steps.push(QuantStep { phase: 1, head: Some(name(h)), tenths: 10, accuracy: acc(&policy)? });
    }
    for h in reverse_topological(critical.iter().copied()) {
        for tenths in 1..=10u8 {
            if tenths < 10 {
                policy.partial_fp8.insert(h, tenths);
            } else {
                policy.partial_fp8.remove(&h);
                policy = policy.with_override(NodeId::Head { layer: h.0, head: h.1 }, Precision::P8);
            }
            steps.push(QuantStep { phase: 2, head: Some(name(h)), tenths, accuracy: acc(&policy)? });
        }
    }
    Ok(QuantCurve {
        critical: critical.into_iter().map(name).collect(),
        steps,
    })
}

/// `phase,head,tenths,accuracy`.
pub fn write_quant_csv(writer: impl Write, curve: &QuantCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["phase", "head", "tenths", "accuracy"])?;
    for s in &curve.steps {
        w.write_record([
            s.phase.to_string(),
            s.head.clone().unwrap_or_default(),
            s.tenths.to_string(),
            s.accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Non-target precisions for a bit width: heads at that width; MLPs and the
/// unembedding at BF16, or at 4 bits when the width is 4.
pub fn ablation_provider(bits: u32) -> Result<PahqProvider> {
    let attention = match bits {
        4 | 8 | 16 => Precision::from_bits(bits).expect("supported width"),
        _ => return Err(Error::UnsupportedBits(bits)),
    };
    let non_attention = if bits >= 8 { Precision::P16 } else { attention };
    Ok(PahqProvider { attention, non_attention })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub bits: u32,
    pub auc: f64,
    /// Accuracy of the circuit found at the configured threshold, run with
    /// its heads at full precision and the rest at this width.
    pub accuracy: f64,
    pub circuit_edges: usize,
    pub points: Vec<RocPoint>,
}

pub fn precision_ablation<S: Scalar>(
    task: &PlantedTask<S>,
    bits: &[u32],
    thresholds: &[f64],
    cfg: &PruneConfig,
) -> Result<Vec<PrecisionRow>> {
    bits.iter()
        .map(|&b| {
            let provider = ablation_provider(b)?;
            let sweep = roc_sweep(task, &provider, thresholds, cfg)?;
            let found = run_acdc(&task.graph(), &task.model, &task.dataset, cfg, &provider)?;
            let policy = high_precision_heads(&found.graph).into_iter().fold(
                PrecisionPolicy::pahq_with(provider.attention, provider.non_attention),
                |p, (layer, head)| p.with_override(NodeId::Head { layer, head }, Precision::P32),
            );
            Ok(PrecisionRow {
                bits: b,
                auc: sweep.auc,
                accuracy: accuracy(&found.graph, &task.model, &task.dataset, &policy)?,
                circuit_edges: found.graph.present_count(),
                points: sweep.points,
            })
        })
        .collect()
}

/// `bits,auc,accuracy,circuit_edges`.
pub fn write_precision_csv(writer: impl Write, rows: &[PrecisionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bits", "auc", "accuracy", "circuit_edges"])?;
    for r in rows {
        w.write_record([r.bits.to_string(), r.auc.to_string(), r.accuracy.to_string(), r.circuit_edges.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
