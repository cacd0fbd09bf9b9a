// SPDX-License-Identifier: MIT OR Apache-2.0

//! The two ways round-to-nearest FP8 hides an edge: deltas below the
//! smallest step round to zero, and small deltas added to a large residual
//! are absorbed by the alignment of the sum.

use serde::{Deserialize, Serialize};

use super::planted::PlantedTask;
use crate::acdc::{score_edges, Method, PruneConfig};
use crate::error::{Error, Result};
use crate::model::{aggregate, forward, ActivationCache, ComputationalGraph, NodeId};
use crate::numerics::{add_f8, encode_f8, step_size, F8E4M3, Precision, Scalar};
use crate::pahq::{PrecisionPolicy, Target};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderflowReport {
    pub edge: String,
    pub step: f64,
    /// Largest clean-vs-corrupt change of the planted head's readout output
    /// at full precision.
    pub max_delta: f64,
    /// Every such change encodes to FP8 zero.
    pub deltas_encode_to_zero: bool,
    pub fp32_score: f64,
    pub fp8_score: f64,
    pub pahq_score: f64,
}

/// Last-row readout dims of the planted head's output, one per answer dim.
fn readout_rows<S: Scalar>(task: &PlantedTask<S>, run: &ActivationCache<S>, node: NodeId) -> Vec<f64> {
    let out = run.output(node);
    let last = out.rows() - 1;
    (0..2 * task.info.plant.n_answers).map(|c| out.get(last, c).as_f64()).collect()
}

/// Scores the planted readout edge under each method and measures the size
/// of the planted head's clean-vs-corrupt change.
pub fn underflow_diagnostic<S: Scalar>(task: &PlantedTask<S>, cfg: &PruneConfig) -> Result<UnderflowReport> {
    let g = task.graph();
    let edge = task.readout_edge();
    let fp32 = PrecisionPolicy::full_precision();
    let mut max_delta = 0.0f64;
    let mut all_zero = true;
    for pair in &task.dataset {
        let clean = forward(&g, &task.model, &pair.clean_tokens()?, &fp32, &[])?;
        let corrupt = forward(&g, &task.model, &pair.corrupt_tokens()?, &fp32, &[])?;
        let node = task.planted_node();
        for (a, b) in readout_rows(task, &clean, node).into_iter().zip(readout_rows(task, &corrupt, node)) {
            let d = a - b;
            max_delta = max_delta.max(d.abs());
            all_zero &= encode_f8(d).decode() == 0.0;
        }
    }
    let score = |m: Method| -> Result<f64> { Ok(score_edges(&g, &task.model, &task.dataset, &[edge], cfg, &m)?[0]) };
    Ok(UnderflowReport {
        edge: edge.to_string(),
        step: step_size(Precision::P8),
        max_delta,
        deltas_encode_to_zero: all_zero,
        fp32_score: score(Method::Acdc)?,
        fp8_score: score(Method::Rtn8)?,
        pahq_score: score(Method::Pahq)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MantissaReport {
    /// Smallest binary exponent of the interference output on a readout dim.
    pub interference_exponent: i32,
    /// Largest binary exponent of the planted output on a readout dim.
    pub planted_exponent: i32,
    /// `add_f8(interference, planted) == interference` for every item and
    /// readout dim of the answer.
    pub absorbed: bool,
    /// Largest change of the unembedding input on readout dims when only the
    /// planted head's output is swapped for its corrupt value, with FP8 sums
    /// and at full precision.
    pub fp8_input_delta: f64,
    pub fp32_input_delta: f64,
    /// Largest relative error of the target head's clean-vs-corrupt change
    /// under the mixed policy against full precision.
    pub pahq_relative_error: f64,
    /// `-log2` of that error, capped at the scalar's significand width.
    pub pahq_bits: f64,
}

fn exponent(x: f64) -> i32 {
    x.abs().log2().floor() as i32
}

/// Unembedding input with `swap`'s output taken from `other`.
fn unembed_input<S: Scalar>(
    g: &ComputationalGraph,
    run: &ActivationCache<S>,
    swap: Option<(NodeId, &ActivationCache<S>)>,
    p: Precision,
) -> Matrix<S> {
    let mut edges: Vec<_> = g.incoming(NodeId::Unembed).collect();
    edges.sort_by_key(|a| a.src);
    let contribs: Vec<&Matrix<S>> = edges
        .iter()
        .map(|e| match swap {
            Some((node, other)) if node == e.src => other.output(e.src).as_ref(),
            _ => run.output(e.src).as_ref(),
        })
        .collect();
    let (rows, cols) = contribs[0].shape();
    aggregate(&contribs, rows, cols, p)
}

/// Measures absorption of the planted signal by the interference head in
/// FP8 residual sums, and the precision of the planted head's change when
/// it is the full-precision target.
pub fn mantissa_diagnostic<S: Scalar>(task: &PlantedTask<S>) -> Result<MantissaReport> {
    let Some(inode) = task.interference_node() else {
        return Err(Error::InvalidArgument("task has no interference head".into()));
    };
    let g = task.graph();
    let pnode = task.planted_node();
    let (pl, ph) = task.info.planted;
    let rtn = PrecisionPolicy::uniform(Precision::P8);
    let fp32 = PrecisionPolicy::full_precision();
    let pahq = PrecisionPolicy::pahq_base().with_target(Some(Target::Head { layer: pl, head: ph }));
    let n = task.info.plant.n_answers;

    let mut report = MantissaReport {
        interference_exponent: i32::MAX,
        planted_exponent: i32::MIN,
        absorbed: true,
        fp8_input_delta: 0.0,
        fp32_input_delta: 0.0,
        pahq_relative_error: 0.0,
        pahq_bits: 0.0,
    };
    for pair in &task.dataset {
        let (ct, xt) = (pair.clean_tokens()?, pair.corrupt_tokens()?);
        let last = ct.seq() - 1;
        let a = pair.answer as usize;
        let readout = [2 * a, 2 * a + 1];

        let r_clean = forward(&g, &task.model, &ct, &rtn, &[])?;
        let r_corrupt = forward(&g, &task.model, &xt, &rtn, &[])?;
        let f_clean = forward(&g, &task.model, &ct, &fp32, &[])?;
        let f_corrupt = forward(&g, &task.model, &xt, &fp32, &[])?;

        for &r in &readout {
            let big = r_clean.output(inode).get(last, r).as_f64();
            let small = f_clean.output(pnode).get(last, r).as_f64();
            report.interference_exponent = report.interference_exponent.min(exponent(big));
            report.planted_exponent = report.planted_exponent.max(exponent(small));
            let (eb, es): (F8E4M3, F8E4M3) = (encode_f8(big), encode_f8(small));
            report.absorbed &= add_f8(eb, es) == eb;
        }
        let d8 = unembed_input(&g, &r_clean, None, Precision::P8)
            .sub(&unembed_input(&g, &r_clean, Some((pnode, &r_corrupt)), Precision::P8));
        let d32 = unembed_input(&g, &f_clean, None, Precision::P32)
            .sub(&unembed_input(&g, &f_clean, Some((pnode, &f_corrupt)), Precision::P32));
        for c in 0..2 * n {
            report.fp8_input_delta = report.fp8_input_delta.max(d8.get(last, c).as_f64().abs());
            report.fp32_input_delta = report.fp32_input_delta.max(d32.get(last, c).as_f64().abs());
        }

        let p_clean = forward(&g, &task.model, &ct, &pahq, &[])?;
        let p_corrupt = forward(&g, &task.model, &xt, &pahq, &[])?;
        let dz_pahq = p_clean.attention(pl).z[ph].sub(&p_corrupt.attention(pl).z[ph]);
        let dz_fp32 = f_clean.attention(pl).z[ph].sub(&f_corrupt.attention(pl).z[ph]);
        for (x, y) in dz_pahq.data().iter().zip(dz_fp32.data()) {
            let (x, y) = (x.as_f64(), y.as_f64());
            if y != 0.0 {
                report.pahq_relative_error = report.pahq_relative_error.max(((x - y) / y).abs());
            } else if x != 0.0 {
                report.pahq_relative_error = f64::INFINITY;
            }
        }
    }
    let width = -(S::epsilon().as_f64().log2()) + 1.0;
    report.pahq_bits = if report.pahq_relative_error == 0.0 {
        width
    } else {
        (-report.pahq_relative_error.log2()).min(width)
    };
    Ok(report)
}
