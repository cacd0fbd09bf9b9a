// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::planted::PlantedTask;
use crate::acdc::{run_acdc, with_worker_pool, PolicyProvider, PruneConfig};
use crate::error::{Error, Result};
use crate::model::Edge;
use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub tau: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Swept edges that survived.
    pub edges: usize,
}

/// Classifies the surviving swept edges against the ground truth.
pub fn classify(tau: f64, swept: &[Edge], kept: &BTreeSet<Edge>, truth: &BTreeSet<Edge>) -> RocPoint {
    let (mut tp, mut fp, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for e in swept {
        let (is_pos, is_kept) = (truth.contains(e), kept.contains(e));
        match (is_pos, is_kept) {
            (true, true) => {
                pos += 1;
                tp += 1;
            }
            (true, false) => pos += 1,
            (false, true) => {
                neg += 1;
                fp += 1;
            }
            (false, false) => neg += 1,
        }
    }
    let rate = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    RocPoint {
        tau,
        tpr: rate(tp, pos),
        fpr: rate(fp, neg),
        edges: tp + fp,
    }
}

/// Points for a single score table: an edge survives `tau` iff its score is
/// at least `tau`.
pub fn points_from_scores(scored: &[(f64, bool)], thresholds: &[f64]) -> Vec<RocPoint> {
    let (pos, neg) = scored.iter().fold((0usize, 0usize), |(p, n), &(_, t)| if t { (p + 1, n) } else { (p, n + 1) });
    let rate = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    thresholds
        .iter()
        .map(|&tau| {
            let tp = scored.iter().filter(|&&(s, t)| t && s >= tau).count();
            let fp = scored.iter().filter(|&&(s, t)| !t && s >= tau).count();
            RocPoint {
                tau,
                tpr: rate(tp, pos),
                fpr: rate(fp, neg),
                edges: tp + fp,
            }
        })
        .collect()
}

/// Area under the Pareto frontier of the points plus the anchors (0,0) and
/// (1,1), joining neighbours by a step that holds the lower TPR until the
/// next point's FPR.
pub fn pessimistic_auc(points: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.push((0.0, 0.0));
    pts.push((1.0, 1.0));
    // Ascending FPR, and for equal FPR the best TPR first.
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut frontier: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        if frontier.last().is_some_and(|q| p.1 <= q.1) {
            continue;
        }
        frontier.push(p);
    }
    let last = frontier[frontier.len() - 1];
    frontier.windows(2).map(|w| (w[1].0 - w[0].0) * w[0].1).sum::<f64>() + (1.0 - last.0) * last.1
}

/// Probability that a random positive outscores a random negative, ties
/// counting half.
pub fn concordance_auc(scored: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.0;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocSweep {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Runs pruning once per threshold and scores the surviving swept edges
/// against the task's ground truth. Thresholds must be ascending.
pub fn roc_sweep<S: Scalar>(
    task: &PlantedTask<S>,
    provider: &dyn PolicyProvider,
    thresholds: &[f64],
    cfg: &PruneConfig,
) -> Result<RocSweep> {
    if thresholds.is_empty() {
        return Err(Error::Empty("threshold list"));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("thresholds must be strictly ascending".into()));
    }
    let graph = task.graph();
    let points = with_worker_pool(|| {
        thresholds
            .par_iter()
            .map(|&tau| {
                let res = run_acdc(&graph, &task.model, &task.dataset, &cfg.clone().with_tau(tau), provider)?;
                Ok(classify(tau, &res.swept, &res.kept_swept(), &task.ground_truth))
            })
            .collect::<Result<Vec<RocPoint>>>()
    })?;
    let auc = pessimistic_auc(&points);
    Ok(RocSweep { points, auc })
}

/// `tau,tpr,fpr,edges`.
pub fn write_roc_csv(writer: impl Write, points: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(scored: &[(f64, bool)]) -> Vec<f64> {
        let mut t: Vec<f64> = scored.iter().map(|s| s.0).collect();
        t.push(f64::INFINITY);
        t.sort_by(f64::total_cmp);
        t
    }

    #[test]
    fn perfect_ranking() {
        let s = [(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        assert_eq!(pessimistic_auc(&points_from_scores(&s, &grid(&s))), 1.0);
        assert_eq!(concordance_auc(&s), 1.0);
    }

    #[test]
    fn one_inversion() {
        let s = [(0.9, true), (0.8, false), (0.3, true), (0.1, false)];
        assert_eq!(pessimistic_auc(&points_from_scores(&s, &grid(&s))), 0.75);
        assert_eq!(concordance_auc(&s), 0.75);
    }

    #[test]
    fn anchors_only() {
        assert_eq!(pessimistic_auc(&[]), 0.0);
        let p = RocPoint { tau: 1.0, tpr: 1.0, fpr: 0.0, edges: 1 };
        assert_eq!(pessimistic_auc(&[p]), 1.0);
    }

    #[test]
    fn classify_counts() {
        let a: Edge = "a0.0->unembed".parse().unwrap();
        let b: Edge = "a0.1->unembed".parse().unwrap();
        let c: Edge = "a0.2->unembed".parse().unwrap();
        let truth = BTreeSet::from([a]);
        let p = classify(0.5, &[a, b, c], &BTreeSet::from([a, b]), &truth);
        assert_eq!((p.tpr, p.fpr, p.edges), (1.0, 0.5, 2));
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        write_roc_csv(&mut buf, &[RocPoint { tau: 0.5, tpr: 1.0, fpr: 0.25, edges: 3 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "tau,tpr,fpr,edges\n0.5,1.0,0.25,3\n");
    }
}
