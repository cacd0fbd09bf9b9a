// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pahq::store::Part;
use crate::pahq::Target;

/// Worker an event ran on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamId {
    Load,
    Low,
    High,
    Coordinator,
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamId::Load => "load",
            StreamId::Low => "low",
            StreamId::High => "high",
            StreamId::Coordinator => "coord",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    /// Transfer of one bundle part.
    Load(Part),
    /// FP8 projection of one component for every head.
    Low(Part),
    /// Full-precision projection of one component for the target head;
    /// `Part::O` is the target's attention plus output projection.
    High(Part),
    /// Assembly, remaining heads and the layer output.
    Sync,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Load(p) => write!(f, "load_{}", p.name()),
            OpKind::Low(p) => write!(f, "low_{}", p.name()),
            OpKind::High(p) => write!(f, "high_{}", p.name()),
            OpKind::Sync => f.write_str("sync"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub stream: StreamId,
    pub step: usize,
    pub op: OpKind,
    pub target: Option<Target>,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<TraceEvent>,
}

impl Timeline {
    pub fn push(&mut self, e: TraceEvent) {
        self.events.push(e);
    }

    pub fn extend(&mut self, other: Timeline) {
        self.events.extend(other.events);
    }

    /// Latest end time.
    pub fn makespan_ns(&self) -> u64 {
        self.events.iter().map(|e| e.end_ns).max().unwrap_or(0)
    }

    /// End of the sync op of each step, in step order.
    pub fn step_ends_ns(&self) -> Vec<u64> {
        let mut ends: Vec<(usize, u64)> = self
            .events
            .iter()
            .filter(|e| e.op == OpKind::Sync)
            .map(|e| (e.step, e.end_ns))
            .collect();
        ends.sort();
        ends.into_iter().map(|(_, t)| t).collect()
    }

    pub fn on(&self, stream: StreamId) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.stream == stream)
    }

    pub fn find(&self, step: usize, op: OpKind) -> Option<&TraceEvent> {
        self.events.iter().find(|e| e.step == step && e.op == op)
    }
}

/// Checks that no two events on one stream overlap, that every
/// full-precision op starts after its part finished loading (when the part
/// was loaded within this timeline), and that each step's sync starts after
/// that step's compute.
pub fn validate_timeline(t: &Timeline) -> Result<()> {
    let fail = |m: String| Err(Error::Scheduler(format!("illegal timeline: {m}")));
    for e in &t.events {
        if e.end_ns < e.start_ns {
            return fail(format!("{} of step {} ends before it starts", e.op, e.step));
        }
    }
    for s in [StreamId::Load, StreamId::Low, StreamId::High, StreamId::Coordinator] {
        let mut evs: Vec<&TraceEvent> = t.on(s).collect();
        evs.sort_by_key(|e| (e.start_ns, e.end_ns));
        for w in evs.windows(2) {
            if w[1].start_ns < w[0].end_ns {
                return fail(format!(
                    "{} (step {}) overlaps {} (step {}) on {s}",
                    w[1].op, w[1].step, w[0].op, w[0].step
                ));
            }
        }
    }
    for e in &t.events {
        if let OpKind::High(p) = e.op {
            let loads: Vec<&TraceEvent> = t
                .events
                .iter()
                .filter(|l| l.op == OpKind::Load(p) && l.target == e.target && l.step <= e.step)
                .collect();
            if !loads.is_empty() && !loads.iter().any(|l| l.end_ns <= e.start_ns) {
                return fail(format!("{} of step {} started before its part arrived", e.op, e.step));
            }
        }
        if e.op == OpKind::Sync {
            for c in t.events.iter().filter(|c| {
                c.step == e.step && matches!(c.op, OpKind::Low(_) | OpKind::High(_))
            }) {
                if c.end_ns > e.start_ns {
                    return fail(format!("sync of step {} started before {}", e.step, c.op));
                }
            }
        }
    }
    Ok(())
}

/// `stream,op,start_ns,end_ns`, with the op prefixed by its step.
pub fn write_trace_csv(writer: impl Write, t: &Timeline) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stream", "op", "start_ns", "end_ns"])?;
    let mut evs = t.events.clone();
    evs.sort_by_key(|e| (e.start_ns, e.stream, e.end_ns));
    for e in evs {
        w.write_record([
            e.stream.to_string(),
            format!("step{}/{}", e.step, e.op),
            e.start_ns.to_string(),
            e.end_ns.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: Option<Target> = Some(Target::Head { layer: 0, head: 0 });

    fn ev(stream: StreamId, op: OpKind, start_ns: u64, end_ns: u64) -> TraceEvent {
        TraceEvent { stream, step: 0, op, target: T, start_ns, end_ns }
    }

    #[test]
    fn legal_and_illegal() {
        let mut t = Timeline::default();
        t.push(ev(StreamId::Load, OpKind::Load(Part::Q), 0, 5));
        t.push(ev(StreamId::Low, OpKind::Low(Part::Q), 0, 8));
        t.push(ev(StreamId::High, OpKind::High(Part::Q), 5, 7));
        t.push(ev(StreamId::Coordinator, OpKind::Sync, 8, 9));
        validate_timeline(&t).unwrap();

        let mut early = t.clone();
        early.events[2].start_ns = 4;
        assert!(validate_timeline(&early).is_err());

        let mut overlap = t.clone();
        overlap.push(ev(StreamId::Low, OpKind::Low(Part::K), 7, 9));
        assert!(validate_timeline(&overlap).is_err());

        let mut sync = t;
        sync.events[3].start_ns = 7;
        assert!(validate_timeline(&sync).is_err());
    }

    #[test]
    fn csv_shape() {
        let mut t = Timeline::default();
        t.push(ev(StreamId::Load, OpKind::Load(Part::O), 3, 10));
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &t).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "stream,op,start_ns,end_ns\nload,step0/load_o,3,10\n");
    }
}
