// SPDX-License-Identifier: MIT OR Apache-2.0

//! Discrete-event replay of the step dependency graph.
//!
//! Streams are FIFO and non-preemptive, so one pass over the ops in issue
//! order gives exact start times: `start = max(stream free, deps done)`.

use serde::{Deserialize, Serialize};

use super::timeline::{OpKind, StreamId, Timeline, TraceEvent};
use super::{StepCost, StreamConfig, TimingModel, LOAD_PARTS};
use crate::model::{Edge, ModelConfig};
use crate::pahq::store::Part;
use crate::pahq::{make_prefetch_plan, target_of};

const QKV: [Part; 3] = [Part::Q, Part::K, Part::V];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// Seconds between consecutive step completions.
    pub per_step: Vec<f64>,
    pub makespan: f64,
    pub timeline: Timeline,
}

/// Closed-form duration of one isolated step.
pub fn closed_form(cost: &StepCost, tm: &TimingModel, streams: StreamConfig) -> f64 {
    let (tr, lo, hi, o) = (tm.t_transfer(cost), tm.t_low(cost), tm.t_high(cost), tm.sync_overhead_sec);
    o + match (streams.load_stream, streams.split_compute) {
        (false, false) => tr + lo + hi,
        (true, false) => tr.max(lo) + hi,
        (false, true) => tr + lo.max(hi),
        (true, true) => lo.max(tr + hi),
    }
}

/// Step costs for sweeping `order`, one step per edge. A step whose source
/// matches the previous one reuses the resident bundle.
pub fn workload_costs(order: &[Edge], config: &ModelConfig, batch: usize, seq: usize) -> Vec<StepCost> {
    let plan = make_prefetch_plan(order);
    order
        .iter()
        .enumerate()
        .map(|(t, e)| {
            let resident = t > 0 && plan.entries[t - 1].already_resident;
            StepCost::new(config, batch, seq, target_of(e), resident)
        })
        .collect()
}

struct Engine {
    free: [f64; 4],
    timeline: Timeline,
}

impl Engine {
    fn run(&mut self, stream: StreamId, step: usize, op: OpKind, cost: &StepCost, ready: f64, dur: f64) -> f64 {
        let i = stream as usize;
        let start = self.free[i].max(ready);
        let end = start + dur;
        self.free[i] = end;
        self.timeline.push(TraceEvent {
            stream,
            step,
            op,
            target: cost.target,
            start_ns: (start * 1e9).round() as u64,
            end_ns: (end * 1e9).round() as u64,
        });
        end
    }
}

pub fn simulate(steps: &[StepCost], tm: &TimingModel, streams: StreamConfig) -> SimResult {
    let mut eng = Engine {
        free: [0.0; 4],
        timeline: Timeline::default(),
    };
    let high_stream = if streams.split_compute { StreamId::High } else { StreamId::Low };
    let mut sync_end: Vec<f64> = Vec::with_capacity(steps.len());
    for (t, cost) in steps.iter().enumerate() {
        let step_start = if t == 0 { 0.0 } else { sync_end[t - 1] };
        // Prefetch is issued when the previous step starts.
        let issue = match (streams.load_stream, t) {
            (true, 0 | 1) => 0.0,
            (true, _) => sync_end[t - 2],
            (false, _) => step_start,
        };
        let mut load_end = [issue; 4];
        let mut all_loaded = issue;
        for (k, &p) in LOAD_PARTS.iter().enumerate() {
            if cost.load_bytes[k] > 0.0 {
                let dur = cost.load_bytes[k] / tm.transfer_bytes_per_sec;
                load_end[k] = eng.run(StreamId::Load, t, OpKind::Load(p), cost, issue, dur);
                all_loaded = load_end[k];
            }
        }
        let compute_ready = if streams.load_stream { step_start } else { step_start.max(all_loaded) };
        let mut done = compute_ready;
        for (k, &p) in QKV.iter().enumerate() {
            let dur = cost.low_flops[k] / tm.low_flops_per_sec;
            done = done.max(eng.run(StreamId::Low, t, OpKind::Low(p), cost, compute_ready, dur));
        }
        if cost.target.and_then(|x| x.head()).is_some() {
            for (k, &p) in QKV.iter().enumerate() {
                let dur = cost.high_qkv_flops[k] / tm.high_flops_per_sec;
                let ready = compute_ready.max(load_end[k]);
                done = done.max(eng.run(high_stream, t, OpKind::High(p), cost, ready, dur));
            }
            let dur = cost.high_out_flops / tm.high_flops_per_sec;
            let ready = compute_ready.max(load_end[3]);
            done = done.max(eng.run(high_stream, t, OpKind::High(Part::O), cost, ready, dur));
        }
        let end = eng.run(StreamId::Coordinator, t, OpKind::Sync, cost, done, tm.sync_overhead_sec);
        sync_end.push(end);
    }
    let per_step = sync_end
        .iter()
        .enumerate()
        .map(|(t, &e)| if t == 0 { e } else { e - sync_end[t - 1] })
        .collect();
    SimResult {
        per_step,
        makespan: sync_end.last().copied().unwrap_or(0.0),
        timeline: eng.timeline,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pahq::Target;
    use crate::scheduler::validate_timeline;

    fn unit_step() -> (StepCost, TimingModel) {
        let c = ModelConfig::new(2, 4, 32, 16, 8);
        let cost = StepCost::new(&c, 1, 8, Some(Target::Head { layer: 0, head: 1 }), false);
        let tm = TimingModel::calibrated(&cost, 5.0, 8.0, 2.0, 0.0);
        (cost, tm)
    }

    #[test]
    fn worked_example() {
        let (cost, tm) = unit_step();
        let want = [(StreamConfig::BOTH, 8.0), (StreamConfig::LOAD, 10.0), (StreamConfig::COMPUTE, 13.0), (StreamConfig::NONE, 15.0)];
        for (s, w) in want {
            assert!((closed_form(&cost, &tm, s) - w).abs() < 1e-9, "{s}");
            let sim = simulate(&[cost], &tm, s);
            assert!((sim.makespan - w).abs() < 1e-9, "{s}: {}", sim.makespan);
            validate_timeline(&sim.timeline).unwrap();
        }
    }

    #[test]
    fn serialized_trace_order() {
        let (cost, tm) = unit_step();
        let sim = simulate(&[cost], &tm, StreamConfig::NONE);
        let t = &sim.timeline;
        let last_load = t.find(0, OpKind::Load(Part::O)).unwrap().end_ns;
        let first_low = t.find(0, OpKind::Low(Part::Q)).unwrap();
        let last_low = t.find(0, OpKind::Low(Part::V)).unwrap().end_ns;
        let first_high = t.find(0, OpKind::High(Part::Q)).unwrap();
        assert!(first_low.start_ns >= last_load);
        assert!(first_high.start_ns >= last_low);
    }

    #[test]
    fn prefetch_hides_transfer_in_steady_state() {
        let (cost, tm) = unit_step();
        let sim = simulate(&[cost; 6], &tm, StreamConfig::BOTH);
        for &s in &sim.per_step {
            assert!((s - 8.0).abs() < 1e-9);
        }
        let serial = simulate(&[cost; 6], &tm, StreamConfig::NONE);
        assert!((serial.makespan - 90.0).abs() < 1e-9);
    }
}
