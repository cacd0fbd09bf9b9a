// SPDX-License-Identifier: MIT OR Apache-2.0

//! Clean/corrupt paired evaluation and the metrics that score a run.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward, forward_reusing, ActivationCache, ComputationalGraph, Edge, EdgePatch, Model,
    ModelConfig, Tokens,
};
use crate::numerics::Scalar;
use crate::pahq::PrecisionPolicy;

/// One clean/corrupt prompt pair with the two tokens the metric compares.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPair {
    pub clean: Vec<u32>,
    pub corrupt: Vec<u32>,
    pub answer: u32,
    pub distractor: u32,
}

impl PromptPair {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.clean.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if self.clean.len() != self.corrupt.len() {
            return Err(Error::Shape(format!(
                "clean prompt has {} tokens, corrupt {}",
                self.clean.len(),
                self.corrupt.len()
            )));
        }
        if self.answer == self.distractor {
            return Err(Error::InvalidArgument(format!(
                "answer and distractor are both {}",
                self.answer
            )));
        }
        let vocab = config.vocab;
        for &id in self.clean.iter().chain(&self.corrupt).chain([&self.answer, &self.distractor]) {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
        }
        Ok(())
    }

    pub fn clean_tokens(&self) -> Result<Tokens> {
        Tokens::single(&self.clean)
    }

    pub fn corrupt_tokens(&self) -> Result<Tokens> {
        Tokens::single(&self.corrupt)
    }

    /// Metric position: the last token.
    pub fn position(&self) -> usize {
        self.clean.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    #[serde(rename = "kl")]
    KlDivergence,
    LogitDiff,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::KlDivergence => "kl",
            MetricKind::LogitDiff => "logitdiff",
        })
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "kl" => Ok(MetricKind::KlDivergence),
            "logitdiff" | "logit_diff" => Ok(MetricKind::LogitDiff),
            _ => Err(format!("unknown metric `{s}` (expected kl or logitdiff)")),
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// `KL(softmax(reference) || softmax(test))` in nats, over one logit row.
pub fn kl_logits<S: Scalar>(reference: &[S], test: &[S]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::Shape(format!(
            "logit rows of length {} and {}",
            reference.len(),
            test.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::Empty("logit row"));
    }
    let p: Vec<f64> = reference.iter().map(|x| x.as_f64()).collect();
    let q: Vec<f64> = test.iter().map(|x| x.as_f64()).collect();
    if p.iter().chain(&q).any(|x| x.is_nan()) {
        return Err(Error::NanLogits);
    }
    let lp = log_softmax(&p);
    let lq = log_softmax(&q);
    let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
    // Non-negative by Gibbs' inequality; clamp rounding noise.
    Ok(kl.max(0.0))
}

/// KL divergence at one position of two `rows x vocab` logit matrices.
pub fn metric_kl<S: Scalar>(
    reference: &crate::tensor::Matrix<S>,
    test: &crate::tensor::Matrix<S>,
    position: usize,
) -> Result<f64> {
    if reference.shape() != test.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", reference.shape(), test.shape())));
    }
    if position >= reference.rows() {
        return Err(Error::InvalidArgument(format!(
            "position {position} outside {} rows",
            reference.rows()
        )));
    }
    kl_logits(reference.row(position), test.row(position))
}

/// `logit[answer] - logit[distractor]` at one position.
pub fn metric_logit_diff<S: Scalar>(
    logits: &crate::tensor::Matrix<S>,
    answer: u32,
    distractor: u32,
    position: usize,
) -> f64 {
    let row = logits.row(position);
    row[answer as usize].as_f64() - row[distractor as usize].as_f64()
}

/// Metric of one run of one item. KL is measured against `reference`.
pub fn item_metric<S: Scalar>(
    kind: MetricKind,
    pair: &PromptPair,
    reference: &ActivationCache<S>,
    run: &ActivationCache<S>,
) -> Result<f64> {
    let pos = pair.position();
    match kind {
        MetricKind::LogitDiff => {
            let v = metric_logit_diff(run.logits(), pair.answer, pair.distractor, pos);
            if v.is_nan() {
                Err(Error::NanLogits)
            } else {
                Ok(v)
            }
        }
        MetricKind::KlDivergence => metric_kl(reference.logits(), run.logits(), pos),
    }
}

/// Arithmetic mean taken over the sorted terms, so any permutation of the
/// dataset gives the same bits.
pub fn sorted_mean(mut terms: Vec<f64>) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    terms.sort_by(f64::total_cmp);
    let n = terms.len() as f64;
    Ok(terms.into_iter().sum::<f64>() / n)
}

/// Clean and corrupt runs of every dataset item under one policy.
#[derive(Debug)]
pub struct BaseRuns<S> {
    pub policy: PrecisionPolicy,
    pub clean: Vec<ActivationCache<S>>,
    pub corrupt: Vec<ActivationCache<S>>,
    clean_tokens: Vec<Tokens>,
    corrupt_tokens: Vec<Tokens>,
}

impl<S: Scalar> BaseRuns<S> {
    pub fn build(
        graph: &ComputationalGraph,
        model: &Model<S>,
        dataset: &[PromptPair],
        policy: &PrecisionPolicy,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let mut runs = BaseRuns {
            policy: policy.clone(),
            clean: Vec::with_capacity(dataset.len()),
            corrupt: Vec::with_capacity(dataset.len()),
            clean_tokens: Vec::with_capacity(dataset.len()),
            corrupt_tokens: Vec::with_capacity(dataset.len()),
        };
        for pair in dataset {
            pair.validate(model.config())?;
            let (ct, xt) = (pair.clean_tokens()?, pair.corrupt_tokens()?);
            runs.clean.push(forward(graph, model, &ct, policy, &[])?);
            runs.corrupt.push(forward(graph, model, &xt, policy, &[])?);
            runs.clean_tokens.push(ct);
            runs.corrupt_tokens.push(xt);
        }
        Ok(runs)
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn clean_tokens(&self, i: usize) -> &Tokens {
        &self.clean_tokens[i]
    }

    pub fn corrupt_tokens(&self, i: usize) -> &Tokens {
        &self.corrupt_tokens[i]
    }
}

/// Clean run of item `i` with `edge` fed from the corrupt run.
pub fn corrupt_patched_run<S: Scalar>(
    graph: &ComputationalGraph,
    model: &Model<S>,
    base: &BaseRuns<S>,
    i: usize,
    edge: Edge,
) -> Result<ActivationCache<S>> {
    let patch = EdgePatch::new(edge, Arc::clone(base.corrupt[i].output(edge.src)));
    forward_reusing(graph, model, &base.clean_tokens[i], &base.policy, &[patch], &base.clean[i])
}

/// `mean_i |L(patched_i) - L(clean_i)|` from precomputed base runs.
pub fn delta_l_with<S: Scalar>(
    graph: &ComputationalGraph,
    model: &Model<S>,
    dataset: &[PromptPair],
    base: &BaseRuns<S>,
    edge: Edge,
    metric: MetricKind,
) -> Result<f64> {
    if !graph.is_present(&edge) {
        return Err(Error::MaskedEdge(edge.to_string()));
    }
    let mut terms = Vec::with_capacity(dataset.len());
    for (i, pair) in dataset.iter().enumerate() {
        let patched = corrupt_patched_run(graph, model, base, i, edge)?;
        let clean = &base.clean[i];
        let l_patched = item_metric(metric, pair, clean, &patched)?;
        let l_clean = item_metric(metric, pair, clean, clean)?;
        terms.push((l_patched - l_clean).abs());
    }
    sorted_mean(terms)
}

/// Loss difference when `edge` carries the corrupt activation.
pub fn delta_l<S: Scalar>(
    edge: Edge,
    dataset: &[PromptPair],
    graph: &ComputationalGraph,
    model: &Model<S>,
    policy: &PrecisionPolicy,
    metric: MetricKind,
) -> Result<f64> {
    let base = BaseRuns::build(graph, model, dataset, policy)?;
    delta_l_with(graph, model, dataset, &base, edge, metric)
}

/// `mean_i ||out_dst(corrupt with edge restored) - out_dst(corrupt)||_2`:
/// the destination's response when `edge` carries the clean activation into
/// an otherwise corrupt run.
pub fn delta_a_with<S: Scalar>(
    graph: &ComputationalGraph,
    model: &Model<S>,
    base: &BaseRuns<S>,
    edge: Edge,
) -> Result<f64> {
    if !graph.is_present(&edge) {
        return Err(Error::MaskedEdge(edge.to_string()));
    }
    let mut terms = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let patch = EdgePatch::new(edge, Arc::clone(base.clean[i].output(edge.src)));
        let restored = forward_reusing(
            graph,
            model,
            &base.corrupt_tokens[i],
            &base.policy,
            &[patch],
            &base.corrupt[i],
        )?;
        let diff = restored.output(edge.dst).sub(base.corrupt[i].output(edge.dst));
        terms.push(diff.frobenius());
    }
    sorted_mean(terms)
}

/// Gap between the edge's loss difference at full precision and under
/// `low_policy`.
pub fn epsilon_precision<S: Scalar>(
    edge: Edge,
    dataset: &[PromptPair],
    graph: &ComputationalGraph,
    model: &Model<S>,
    low_policy: &PrecisionPolicy,
    metric: MetricKind,
) -> Result<f64> {
    let high = delta_l(edge, dataset, graph, model, &PrecisionPolicy::full_precision(), metric)?;
    let low = delta_l(edge, dataset, graph, model, low_policy, metric)?;
    Ok((high - low).abs())
}

/// Reads a JSON Lines dataset: one prompt pair per non-blank line.
pub fn read_dataset(reader: impl BufRead) -> Result<Vec<PromptPair>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PromptPair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

pub fn write_dataset(mut writer: impl Write, dataset: &[PromptPair]) -> Result<()> {
    for pair in dataset {
        serde_json::to_writer(&mut writer, pair)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<PromptPair>> {
    read_dataset(BufReader::new(fs::File::open(path)?))
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &[PromptPair]) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, dataset)?;
    fs::write(path, buf)?;
    Ok(())
}
