// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tasks with a known circuit.
//!
//! The residual stream is split into readout dims (two per answer), key dims
//! (one per answer), one constant dim and generic dims. The first prompt
//! token is an answer whose embedding is marked on its key dim; the planted
//! head attends uniformly, copies the key dims through `W_V` and writes the
//! matching readout dims through `W_O`, scaled by `signal_scale`. The
//! unembedding reads only readout dims for answer tokens. Every other head
//! reads everything but writes generic dims only, so it moves the logit
//! difference only through the final layer norm's scale.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ComputationalGraph, Edge, EdgePatch, Model, ModelConfig, NodeId, WeightSet};
use crate::numerics::Scalar;
use crate::pahq::PrecisionPolicy;
use crate::patching::{metric_logit_diff, sorted_mean, PromptPair};
use crate::tensor::Matrix;

/// Share of the full-model logit difference the planted circuit must keep.
pub const CONSTRUCTION_RETENTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub model: ModelConfig,
    pub n_answers: usize,
    pub n_items: usize,
    /// Unembedding weight on each readout dim of an answer token.
    pub readout_gain: f64,
    /// Embedding value on an answer token's key dim.
    pub key_gain: f64,
    pub noise_std: f64,
    /// Adds a head in the planted layer whose output on every readout dim
    /// exceeds the planted output by at least this many binary exponents.
    pub interference_gap: Option<u32>,
    /// Planted head; drawn from the seed when absent.
    pub planted: Option<(usize, usize)>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(2, 4, 32, 13, 6),
            n_answers: 4,
            n_items: 8,
            readout_gain: 64.0,
            key_gain: 4.0,
            noise_std: 0.1,
            interference_gap: None,
            planted: None,
        }
    }
}

impl PlantConfig {
    pub fn with_model(mut self, model: ModelConfig) -> Self {
        self.model = model;
        self
    }

    pub fn with_interference(mut self, gap: u32) -> Self {
        self.interference_gap = Some(gap);
        self
    }

    pub fn with_planted(mut self, layer: usize, head: usize) -> Self {
        self.planted = Some((layer, head));
        self
    }

    fn layout(&self) -> Layout {
        let a = self.n_answers;
        Layout {
            answers: a,
            key0: 2 * a,
            c0: 3 * a,
            generic0: 3 * a + 1,
            d: self.model.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let c = &self.model;
        let mut problems = Vec::new();
        if self.n_answers < 2 {
            problems.push("n_answers must be at least 2".to_string());
        }
        if c.d_model < 3 * self.n_answers + 4 {
            problems.push(format!("d_model {} leaves too few generic dims for {} answers", c.d_model, self.n_answers));
        }
        if c.d_k < self.n_answers {
            problems.push(format!("d_k {} is smaller than n_answers {}", c.d_k, self.n_answers));
        }
        if c.vocab < self.n_answers + 2 {
            problems.push(format!("vocab {} needs room for answers, a filler and the query", c.vocab));
        }
        if c.seq_len < 2 {
            problems.push("seq_len must be at least 2".to_string());
        }
        if self.n_items == 0 {
            problems.push("n_items must be positive".to_string());
        }
        if self.interference_gap.is_some() && c.n_heads < 2 {
            problems.push("interference needs at least two heads".to_string());
        }
        if let Some((l, h)) = self.planted {
            if l >= c.n_layers || h >= c.n_heads {
                problems.push(format!("planted head a{l}.{h} is outside the model"));
            }
            if self.interference_gap.is_some() && l != 0 {
                problems.push("with interference the planted head must sit in layer 0".to_string());
            }
        }
        for (name, v) in [("readout_gain", self.readout_gain), ("key_gain", self.key_gain), ("noise_std", self.noise_std)] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be finite and non-negative"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    answers: usize,
    key0: usize,
    c0: usize,
    generic0: usize,
    d: usize,
}

impl Layout {
    fn readout(&self, a: usize) -> [usize; 2] {
        [2 * a, 2 * a + 1]
    }

    fn is_generic(&self, col: usize) -> bool {
        col >= self.generic0
    }

    /// Shifts the generic dims of `row` so the whole row has zero mean.
    fn center(&self, row: &mut [f64]) {
        let mean = row.iter().sum::<f64>() / (self.d - self.generic0) as f64;
        for v in &mut row[self.generic0..] {
            *v -= mean;
        }
    }
}

/// Metadata of a generated task, stored next to its weights and dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub seed: u64,
    pub signal_scale: f64,
    pub plant: PlantConfig,
    pub planted: (usize, usize),
    pub interference: Option<(usize, usize)>,
    pub ground_truth: Vec<Edge>,
    /// Mean full-model logit difference at full precision.
    pub model_logit_diff: f64,
    /// Share of it kept with every other edge corrupted.
    pub retention: f64,
}

#[derive(Debug, Clone)]
pub struct PlantedTask<S: Scalar> {
    pub model: Model<S>,
    pub dataset: Vec<PromptPair>,
    pub ground_truth: BTreeSet<Edge>,
    pub signal_scale: f64,
    pub info: TaskInfo,
}

impl<S: Scalar> PlantedTask<S> {
    pub fn weights(&self) -> &WeightSet<S> {
        self.model.weights()
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn graph(&self) -> ComputationalGraph {
        ComputationalGraph::full(*self.config())
    }

    pub fn planted_node(&self) -> NodeId {
        let (layer, head) = self.info.planted;
        NodeId::Head { layer, head }
    }

    pub fn interference_node(&self) -> Option<NodeId> {
        self.info.interference.map(|(layer, head)| NodeId::Head { layer, head })
    }

    /// The planted head's edge into the unembedding.
    pub fn readout_edge(&self) -> Edge {
        Edge::new(self.planted_node(), NodeId::Unembed)
    }

    /// Rebuilds a task from saved parts, re-running the construction check.
    pub fn from_parts(weights: WeightSet<S>, dataset: Vec<PromptPair>, info: TaskInfo) -> Result<Self> {
        let model = Model::new(weights)?;
        for p in &dataset {
            p.validate(model.config())?;
        }
        let task = Self {
            model,
            dataset,
            ground_truth: info.ground_truth.iter().copied().collect(),
            signal_scale: info.signal_scale,
            info,
        };
        task.check_construction()?;
        Ok(task)
    }

    /// Full-precision share of the logit difference kept with every
    /// non-ground-truth edge corrupted. Errors when it is below
    /// [`CONSTRUCTION_RETENTION`].
    pub fn check_construction(&self) -> Result<f64> {
        let g = self.graph();
        let policy = PrecisionPolicy::full_precision();
        let full = mean_logit_diff(&g, &self.model, &self.dataset, &policy, None)?;
        let circuit = mean_logit_diff(&g, &self.model, &self.dataset, &policy, Some(&self.ground_truth))?;
        let retention = if full > 0.0 { circuit / full } else { 0.0 };
        if !(full > 0.0 && retention >= CONSTRUCTION_RETENTION) {
            return Err(Error::Construction(format!(
                "planted circuit keeps {:.4} of a logit difference of {full:.6} (need {CONSTRUCTION_RETENTION})",
                retention
            )));
        }
        Ok(retention)
    }
}

/// Clean-run logit difference of every item. With `keep`, every edge of the
/// graph outside `keep` carries the corrupt run's activation.
pub fn logit_diffs<S: Scalar>(
    graph: &ComputationalGraph,
    model: &Model<S>,
    dataset: &[PromptPair],
    policy: &PrecisionPolicy,
    keep: Option<&BTreeSet<Edge>>,
) -> Result<Vec<f64>> {
    dataset
        .iter()
        .map(|pair| {
            let clean = pair.clean_tokens()?;
            let run = match keep {
                None => forward(graph, model, &clean, policy, &[])?,
                Some(keep) => {
                    let corrupt = forward(graph, model, &pair.corrupt_tokens()?, policy, &[])?;
                    let patches: Vec<EdgePatch<S>> = graph
                        .present_edges()
                        .filter(|e| !keep.contains(e))
                        .map(|e| EdgePatch::new(e, Arc::clone(corrupt.output(e.src))))
                        .collect();
                    forward(graph, model, &clean, policy, &patches)?
                }
            };
            Ok(metric_logit_diff(run.logits(), pair.answer, pair.distractor, pair.position()))
        })
        .collect()
}

pub fn mean_logit_diff<S: Scalar>(
    graph: &ComputationalGraph,
    model: &Model<S>,
    dataset: &[PromptPair],
    policy: &PrecisionPolicy,
    keep: Option<&BTreeSet<Edge>>,
) -> Result<f64> {
    sorted_mean(logit_diffs(graph, model, dataset, policy, keep)?)
}

/// Fraction of items whose clean logit difference is positive on `graph`.
pub fn accuracy<S: Scalar>(
    graph: &ComputationalGraph,
    model: &Model<S>,
    dataset: &[PromptPair],
    policy: &PrecisionPolicy,
) -> Result<f64> {
    let lds = logit_diffs(graph, model, dataset, policy, None)?;
    if lds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(lds.iter().filter(|&&v| v > 0.0).count() as f64 / lds.len() as f64)
}

fn sample_row(rng: &mut ChaCha8Rng, normal: &Normal<f64>, lay: &Layout, std: f64) -> Vec<f64> {
    (0..lay.d)
        .map(|c| if lay.is_generic(c) { std * normal.sample(rng) } else { 0.0 })
        .collect()
}

fn set_row<S: Scalar>(m: &mut Matrix<S>, r: usize, row: &[f64]) {
    for (c, &v) in row.iter().enumerate() {
        m.set(r, c, S::of(v));
    }
}

/// Builds a planted task. Deterministic in `seed`.
pub fn generate_planted<S: Scalar>(plant: &PlantConfig, seed: u64, signal_scale: f64) -> Result<PlantedTask<S>> {
    plant.validate()?;
    if !(signal_scale.is_finite() && signal_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("signal_scale must be finite and non-negative, got {signal_scale}")));
    }
    let c = plant.model;
    let lay = plant.layout();
    let (dk, n_heads) = (c.d_k, c.n_heads);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let planted = match plant.planted {
        Some(p) => p,
        None if plant.interference_gap.is_some() => (0, rng.random_range(0..n_heads)),
        None => (rng.random_range(0..c.n_layers), rng.random_range(0..n_heads)),
    };
    let interference = plant.interference_gap.map(|_| (0, (planted.1 + 1) % n_heads));

    let mut w = WeightSet::<S>::zeros(c);
    let query = (c.vocab - 1) as u32;
    for t in 0..c.vocab {
        let mut row = sample_row(&mut rng, &normal, &lay, 1.0);
        if t < lay.answers {
            row[lay.key0 + t] = plant.key_gain;
        }
        lay.center(&mut row);
        set_row(&mut w.embed, t, &row);
    }
    for p in 0..c.seq_len {
        let mut row = sample_row(&mut rng, &normal, &lay, 0.3);
        row[lay.c0] = 1.0;
        lay.center(&mut row);
        set_row(&mut w.pos, p, &row);
    }

    let noise = plant.noise_std;
    for (l, layer) in w.layers.iter_mut().enumerate() {
        for h in 0..n_heads {
            let cols = h * dk..(h + 1) * dk;
            if (l, h) == planted {
                for a in 0..lay.answers {
                    layer.w_v.set(lay.key0 + a, h * dk + a, S::one());
                    for r in lay.readout(a) {
                        layer.w_o.set(h * dk + a, r, S::of(signal_scale));
                    }
                }
                continue;
            }
            if Some((l, h)) == interference {
                layer.w_v.set(lay.c0, h * dk, S::one());
                continue;
            }
            for m in [&mut layer.w_q, &mut layer.w_k, &mut layer.w_v] {
                for r in 0..lay.d {
                    for col in cols.clone() {
                        m.set(r, col, S::of(noise * normal.sample(&mut rng)));
                    }
                }
            }
            for r in cols.clone() {
                let mut row = sample_row(&mut rng, &normal, &lay, noise);
                lay.center(&mut row);
                set_row(&mut layer.w_o, r, &row);
            }
        }
        if let Some(mlp) = &mut layer.mlp {
            for v in mlp.w_in.data_mut() {
                *v = S::of(noise * normal.sample(&mut rng));
            }
            for r in 0..c.d_mlp {
                let mut row = sample_row(&mut rng, &normal, &lay, noise);
                lay.center(&mut row);
                set_row(&mut mlp.w_out, r, &row);
            }
        }
    }
    for t in 0..c.vocab {
        for r in 0..lay.d {
            let v = if t < lay.answers {
                if lay.readout(t).contains(&r) {
                    plant.readout_gain
                } else {
                    0.0
                }
            } else if lay.is_generic(r) {
                normal.sample(&mut rng)
            } else {
                0.0
            };
            w.unembed.set(r, t, S::of(v));
        }
    }

    let fillers: Vec<u32> = (lay.answers as u32..query).collect();
    let dataset: Vec<PromptPair> = (0..plant.n_items)
        .map(|_| {
            let a = rng.random_range(0..lay.answers as u32);
            let b = (a + rng.random_range(1..lay.answers as u32)) % lay.answers as u32;
            let mid: Vec<u32> = (0..c.seq_len - 2)
                .map(|_| *fillers.choose(&mut rng).expect("at least one filler"))
                .collect();
            let prompt = |k: u32| {
                let mut p = vec![k];
                p.extend(&mid);
                p.push(query);
                p
            };
            PromptPair {
                clean: prompt(a),
                corrupt: prompt(b),
                answer: a,
                distractor: b,
            }
        })
        .collect();

    if let (Some(gap), Some((il, ih))) = (plant.interference_gap, interference) {
        calibrate_interference(&mut w, &dataset, planted, (il, ih), gap, &lay)?;
    }

    let ground_truth: BTreeSet<Edge> = {
        let node = NodeId::Head { layer: planted.0, head: planted.1 };
        [Edge::new(NodeId::Embed, node), Edge::new(node, NodeId::Unembed)].into()
    };
    let model = Model::new(w)?;
    let mut task = PlantedTask {
        model,
        dataset,
        ground_truth: ground_truth.clone(),
        signal_scale,
        info: TaskInfo {
            seed,
            signal_scale,
            plant: plant.clone(),
            planted,
            interference,
            ground_truth: ground_truth.into_iter().collect(),
            model_logit_diff: 0.0,
            retention: 0.0,
        },
    };
    task.info.retention = task.check_construction()?;
    task.info.model_logit_diff = mean_logit_diff(
        &task.graph(),
        &task.model,
        &task.dataset,
        &PrecisionPolicy::full_precision(),
        None,
    )?;
    Ok(task)
}

/// Sets the interference head's `W_O` so its readout output is at least
/// `2^gap` times the largest planted readout output, item by item.
fn calibrate_interference<S: Scalar>(
    w: &mut WeightSet<S>,
    dataset: &[PromptPair],
    planted: (usize, usize),
    (il, ih): (usize, usize),
    gap: u32,
    lay: &Layout,
) -> Result<()> {
    let model = Model::new(w.clone())?;
    let g = ComputationalGraph::full(*model.config());
    let policy = PrecisionPolicy::full_precision();
    let dk = model.config().d_k;
    let (mut s_max, mut z_min) = (0.0f64, f64::INFINITY);
    for pair in dataset {
        for tokens in [pair.clean_tokens()?, pair.corrupt_tokens()?] {
            let run = forward(&g, &model, &tokens, &policy, &[])?;
            let last = tokens.seq() - 1;
            let out = run.output(NodeId::Head { layer: planted.0, head: planted.1 });
            for a in 0..lay.answers {
                for r in lay.readout(a) {
                    s_max = s_max.max(out.get(last, r).as_f64().abs());
                }
            }
            let z = &run.attention(il).z[ih];
            z_min = z_min.min(z.get(last, 0).as_f64());
        }
    }
    if !(s_max > 0.0 && z_min > 0.0) {
        return Err(Error::Construction("interference calibration saw no planted signal".into()));
    }
    let target = 2f64.powi(s_max.log2().floor() as i32 + gap as i32 + 1);
    let weight = target / z_min;
    for a in 0..lay.answers {
        for r in lay.readout(a) {
            w.layers[il].w_o.set(ih * dk, r, S::of(weight));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let p = PlantConfig::default();
        let a = generate_planted::<f32>(&p, 3, 1.0).unwrap();
        let b = generate_planted::<f32>(&p, 3, 1.0).unwrap();
        assert!(a.weights().bitwise_eq(b.weights()));
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.info, b.info);
    }

    #[test]
    fn zero_signal_fails_construction() {
        let err = generate_planted::<f32>(&PlantConfig::default(), 3, 0.0).unwrap_err();
        assert!(matches!(err, Error::Construction(_)), "{err}");
    }

    #[test]
    fn plant_carries_the_behavior() {
        for seed in 0..4 {
            let t = generate_planted::<f32>(&PlantConfig::default(), seed, 1.0).unwrap();
            assert!(t.info.retention >= CONSTRUCTION_RETENTION);
            assert!(t.info.model_logit_diff > 0.0);
        }
    }

    #[test]
    fn interference_head_dominates_readout() {
        let p = PlantConfig::default().with_interference(6);
        let t = generate_planted::<f32>(&p, 5, 1.0).unwrap();
        assert_eq!(t.info.planted.0, 0);
        assert_ne!(t.info.interference, Some(t.info.planted));
    }
}
