// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy edge pruning by activation patching.
//!
//! Each iteration scores every present edge in scope against the mask as it
//! stood when the iteration began, then removes every edge scoring below
//! `tau`. Iteration stops after `max_steps`, when no edge in scope is left,
//! or when the fraction removed falls to `change_rate_eps` or below.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ComputationalGraph, Edge, Model, NodeId};
use crate::numerics::{Precision, Scalar};
use crate::pahq::{target_of, PrecisionPolicy};
use crate::patching::{delta_a_with, delta_l_with, BaseRuns, MetricKind, PromptPair};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CIRCUITQUANT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Mean absolute metric change with the edge corrupted.
    #[serde(rename = "loss")]
    LossDiff,
    /// Destination output change with the edge restored into a corrupt run.
    #[serde(rename = "act")]
    ActDiff,
}

impl FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "loss" => Ok(ScoreMode::LossDiff),
            "act" => Ok(ScoreMode::ActDiff),
            _ => Err(format!("unknown score mode `{s}` (expected loss or act)")),
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::LossDiff => "loss",
            ScoreMode::ActDiff => "act",
        })
    }
}

/// Which edges the sweep scores. Edges outside the scope are always kept.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepScope {
    /// Edges whose source is an attention head.
    #[default]
    Heads,
    /// Edges whose source is a head or an MLP.
    Components,
    /// Every edge.
    All,
}

impl SweepScope {
    pub fn includes(self, edge: &Edge) -> bool {
        match self {
            SweepScope::Heads => edge.src.is_head(),
            SweepScope::Components => edge.src != NodeId::Embed,
            SweepScope::All => true,
        }
    }
}

impl FromStr for SweepScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "heads" => Ok(SweepScope::Heads),
            "components" => Ok(SweepScope::Components),
            "all" => Ok(SweepScope::All),
            _ => Err(format!("unknown sweep scope `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub tau: f64,
    pub delta: Option<f64>,
    pub max_steps: usize,
    pub change_rate_eps: f64,
    pub metric: MetricKind,
    pub score_mode: ScoreMode,
    #[serde(default)]
    pub scope: SweepScope,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            delta: None,
            max_steps: 10,
            change_rate_eps: 0.0,
            metric: MetricKind::LogitDiff,
            score_mode: ScoreMode::LossDiff,
            scope: SweepScope::Heads,
        }
    }
}

impl PruneConfig {
    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    /// Every violated constraint, by field name.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            v.push(format!("tau must be a non-negative number, got {}", self.tau));
        }
        if let Some(d) = self.delta {
            if !(d.is_finite() && d >= 0.0) {
                v.push(format!("delta must be a non-negative number, got {d}"));
            }
        }
        if self.max_steps == 0 {
            v.push("max_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.change_rate_eps) {
            v.push(format!("eps must lie in [0, 1), got {}", self.change_rate_eps));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(v.join("; ")))
        }
    }
}

/// Chooses the precision policy each edge is scored under.
pub trait PolicyProvider: Sync {
    fn policy(&self, edge: &Edge) -> PrecisionPolicy;
}

impl<F: Fn(&Edge) -> PrecisionPolicy + Sync> PolicyProvider for F {
    fn policy(&self, edge: &Edge) -> PrecisionPolicy {
        self(edge)
    }
}

/// The three scoring methods compared throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Everything native.
    Acdc,
    /// Everything, residual sums included, at FP8.
    Rtn8,
    /// Source component at full precision, other heads FP8, the rest BF16.
    Pahq,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Acdc, Method::Rtn8, Method::Pahq];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Acdc => "ACDC",
            Method::Rtn8 => "RTN-Q",
            Method::Pahq => "PAHQ",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Acdc => "acdc",
            Method::Rtn8 => "rtn8",
            Method::Pahq => "pahq",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "acdc" => Ok(Method::Acdc),
            "rtn8" => Ok(Method::Rtn8),
            "pahq" => Ok(Method::Pahq),
            _ => Err(format!("unknown method `{s}` (expected acdc, rtn8 or pahq)")),
        }
    }
}

impl PolicyProvider for Method {
    fn policy(&self, edge: &Edge) -> PrecisionPolicy {
        match self {
            Method::Acdc => PrecisionPolicy::full_precision(),
            Method::Rtn8 => PrecisionPolicy::uniform(Precision::P8),
            Method::Pahq => PrecisionPolicy::pahq_base().with_target(target_of(edge)),
        }
    }
}

/// PAHQ with chosen non-target precisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PahqProvider {
    pub attention: Precision,
    pub non_attention: Precision,
}

impl PolicyProvider for PahqProvider {
    fn policy(&self, edge: &Edge) -> PrecisionPolicy {
        PrecisionPolicy::pahq_with(self.attention, self.non_attention).with_target(target_of(edge))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub edge: Edge,
    pub score: f64,
    pub kept: bool,
}

/// Scores of one iteration, in sweep order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScoreTable {
    pub iteration: usize,
    pub rows: Vec<ScoreRow>,
}

impl EdgeScoreTable {
    pub fn score(&self, edge: &Edge) -> Option<f64> {
        self.rows.iter().find(|r| r.edge == *edge).map(|r| r.score)
    }

    pub fn as_map(&self) -> BTreeMap<Edge, f64> {
        self.rows.iter().map(|r| (r.edge, r.score)).collect()
    }
}

#[derive(Serialize)]
struct CsvRow {
    iteration: usize,
    edge: String,
    src: String,
    dst: String,
    score: f64,
    kept: bool,
}

/// Writes score tables as CSV: `iteration,edge,src,dst,score,kept`.
pub fn write_score_csv(writer: impl Write, tables: &[EdgeScoreTable]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for t in tables {
        for r in &t.rows {
            w.serialize(CsvRow {
                iteration: t.iteration,
                edge: r.edge.to_string(),
                src: r.edge.src.to_string(),
                dst: r.edge.dst.to_string(),
                score: r.score,
                kept: r.kept,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CircuitResult {
    /// Graph with the final mask.
    pub graph: ComputationalGraph,
    /// Edges in scope at the start of the run.
    pub swept: Vec<Edge>,
    pub tables: Vec<EdgeScoreTable>,
    pub iterations: usize,
    /// Number of times each edge was scored.
    pub evaluations: BTreeMap<Edge, usize>,
}

impl CircuitResult {
    pub fn circuit(&self) -> Vec<Edge> {
        self.graph.present_edges().collect()
    }

    /// Surviving edges among those swept.
    pub fn kept_swept(&self) -> BTreeSet<Edge> {
        self.swept
            .iter()
            .filter(|e| self.graph.is_present(e))
            .copied()
            .collect()
    }

    /// Heads that are sources of surviving edges.
    pub fn high_precision_heads(&self) -> BTreeSet<(usize, usize)> {
        high_precision_heads(&self.graph)
    }
}

pub fn high_precision_heads(graph: &ComputationalGraph) -> BTreeSet<(usize, usize)> {
    graph.present_edges().filter_map(|e| e.src.as_head()).collect()
}

/// Policy for inference over a discovered circuit: its source heads at full
/// precision, other heads FP8, non-attention BF16.
pub fn circuit_policy(graph: &ComputationalGraph) -> PrecisionPolicy {
    high_precision_heads(graph)
        .into_iter()
        .fold(PrecisionPolicy::pahq_base(), |p, (layer, head)| {
            p.with_override(NodeId::Head { layer, head }, Precision::P32)
        })
}

/// Runs `f` on a pool capped by [`THREADS_ENV`], or on the global pool.
pub fn with_worker_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

/// Scores `edges` against `graph`'s current mask. Base runs are built once
/// per distinct policy; edges fan out across workers and come back in input
/// order.
pub fn score_edges<S: Scalar>(
    graph: &ComputationalGraph,
    model: &Model<S>,
    dataset: &[PromptPair],
    edges: &[Edge],
    cfg: &PruneConfig,
    provider: &dyn PolicyProvider,
) -> Result<Vec<f64>> {
    let policies: Vec<PrecisionPolicy> = edges.iter().map(|e| provider.policy(e)).collect();
    let mut distinct: Vec<PrecisionPolicy> = Vec::new();
    let mut slot: HashMap<PrecisionPolicy, usize> = HashMap::new();
    let index: Vec<usize> = policies
        .into_iter()
        .map(|p| {
            *slot.entry(p.clone()).or_insert_with(|| {
                distinct.push(p);
                distinct.len() - 1
            })
        })
        .collect();
    let bases: Vec<Arc<BaseRuns<S>>> = distinct
        .par_iter()
        .map(|p| BaseRuns::build(graph, model, dataset, p).map(Arc::new))
        .collect::<Result<_>>()?;
    edges
        .par_iter()
        .zip(index.par_iter())
        .map(|(&edge, &i)| {
            let base = &bases[i];
            match cfg.score_mode {
                ScoreMode::LossDiff => delta_l_with(graph, model, dataset, base, edge, cfg.metric),
                ScoreMode::ActDiff => {
                    let delta_a = delta_a_with(graph, model, base, edge)?;
                    Ok(if delta_a > cfg.delta.unwrap_or(0.0) { delta_a } else { 0.0 })
                }
            }
        })
        .collect()
}

pub fn run_acdc<S: Scalar>(
    graph: &ComputationalGraph,
    model: &Model<S>,
    dataset: &[PromptPair],
    cfg: &PruneConfig,
    provider: &dyn PolicyProvider,
) -> Result<CircuitResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut graph = graph.clone();
    let swept: Vec<Edge> = graph
        .enumerate_edges()
        .into_iter()
        .filter(|e| cfg.scope.includes(e))
        .collect();
    let mut tables = Vec::new();
    let mut evaluations: BTreeMap<Edge, usize> = BTreeMap::new();
    let mut t = 0;
    while t < cfg.max_steps {
        let order: Vec<Edge> = graph
            .enumerate_edges()
            .into_iter()
            .filter(|e| cfg.scope.includes(e))
            .collect();
        if order.is_empty() {
            break;
        }
        let scores = with_worker_pool(|| score_edges(&graph, model, dataset, &order, cfg, provider))?;
        let mut rows = Vec::with_capacity(order.len());
        let mut removed = 0usize;
        for (&edge, &score) in order.iter().zip(&scores) {
            *evaluations.entry(edge).or_default() += 1;
            let kept = !(score < cfg.tau);
            rows.push(ScoreRow { edge, score, kept });
        }
        for r in rows.iter().filter(|r| !r.kept) {
            graph.remove(&r.edge)?;
            removed += 1;
        }
        t += 1;
        tables.push(EdgeScoreTable { iteration: t, rows });
        let change = removed as f64 / order.len() as f64;
        if change <= cfg.change_rate_eps {
            break;
        }
    }
    Ok(CircuitResult {
        graph,
        swept,
        tables,
        iterations: t,
        evaluations,
    })
}

/// `n` log-uniform thresholds from `lo` to `hi`, endpoints exact.
pub fn threshold_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "threshold bounds need 0 < lo < hi, got {lo}, {hi}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("threshold grid needs n >= 2, got {n}")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    let last = (n - 1) as f64;
    let mut out: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / last).exp()).collect();
    out[0] = lo;
    out[n - 1] = hi;
    Ok(out)
}
