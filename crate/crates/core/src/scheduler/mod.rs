// SPDX-License-Identifier: MIT OR Apache-2.0

//! Three-stream pipeline: a loader moves full-precision bundles, a low
//! stream computes every head's FP8 projections, a high stream computes the
//! target head at full precision as each of its parts arrives.
//!
//! The executor runs real worker threads; the simulator replays the same
//! dependency graph with modeled durations.

mod ablate;
mod exec;
mod sim;
mod timeline;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::pahq::store::Part;
use crate::pahq::Target;

pub use ablate::{ablate, AblationRow, Workload};
pub use exec::{ExecOptions, Pipeline, StepSpec};
pub use sim::{closed_form, simulate, workload_costs, SimResult};
pub use timeline::{validate_timeline, write_trace_csv, StreamId, Timeline, TraceEvent};

/// Which overlaps are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Transfers run on their own stream and prefetch the next bundle.
    pub load_stream: bool,
    /// Low- and high-precision compute run on separate streams.
    pub split_compute: bool,
}

impl StreamConfig {
    pub const NONE: StreamConfig = StreamConfig { load_stream: false, split_compute: false };
    pub const LOAD: StreamConfig = StreamConfig { load_stream: true, split_compute: false };
    pub const COMPUTE: StreamConfig = StreamConfig { load_stream: false, split_compute: true };
    pub const BOTH: StreamConfig = StreamConfig { load_stream: true, split_compute: true };
    pub const ALL: [StreamConfig; 4] = [Self::BOTH, Self::LOAD, Self::COMPUTE, Self::NONE];

    pub fn name(self) -> &'static str {
        match (self.load_stream, self.split_compute) {
            (true, true) => "both",
            (true, false) => "load",
            (false, true) => "compute",
            (false, false) => "none",
        }
    }
}

impl fmt::Display for StreamConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StreamConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Self::BOTH),
            "load" => Ok(Self::LOAD),
            "compute" => Ok(Self::COMPUTE),
            "none" => Ok(Self::NONE),
            _ => Err(format!("unknown stream config `{s}` (expected none, load, compute or both)")),
        }
    }
}

/// Throughputs of the emulated device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub transfer_bytes_per_sec: f64,
    pub low_flops_per_sec: f64,
    pub high_flops_per_sec: f64,
    pub sync_overhead_sec: f64,
}

impl TimingModel {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = [self.transfer_bytes_per_sec, self.low_flops_per_sec, self.high_flops_per_sec]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
            && self.sync_overhead_sec.is_finite()
            && self.sync_overhead_sec >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::InvalidArgument(format!("invalid timing model {self:?}")))
        }
    }

    /// Rates that give `cost` the requested per-step durations in seconds.
    pub fn calibrated(cost: &StepCost, t_transfer: f64, t_low: f64, t_high: f64, overhead: f64) -> Self {
        Self {
            transfer_bytes_per_sec: cost.transfer_bytes() / t_transfer,
            low_flops_per_sec: cost.low_flops.iter().sum::<f64>() / t_low,
            high_flops_per_sec: cost.high_flops() / t_high,
            sync_overhead_sec: overhead,
        }
    }

    pub fn t_transfer(&self, cost: &StepCost) -> f64 {
        cost.transfer_bytes() / self.transfer_bytes_per_sec
    }

    pub fn t_low(&self, cost: &StepCost) -> f64 {
        cost.low_flops.iter().sum::<f64>() / self.low_flops_per_sec
    }

    pub fn t_high(&self, cost: &StepCost) -> f64 {
        cost.high_flops() / self.high_flops_per_sec
    }
}

/// Work of one step: the target layer's attention for one edge evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub target: Option<Target>,
    /// Bytes of the Q, K, V slices and the layer's `W_O`; zero when the
    /// bundle is already resident.
    pub load_bytes: [f64; 4],
    /// All heads' Q, K and V projections.
    pub low_flops: [f64; 3],
    /// Target head's Q, K and V projections.
    pub high_qkv_flops: [f64; 3],
    /// Target head's attention and output projection.
    pub high_out_flops: f64,
}

pub const LOAD_PARTS: [Part; 4] = [Part::Q, Part::K, Part::V, Part::O];

impl StepCost {
    /// Cost of one step over `rows = batch * seq` rows.
    pub fn new(c: &ModelConfig, batch: usize, seq: usize, target: Option<Target>, resident: bool) -> Self {
        let rows = (batch * seq) as f64;
        let (d, dk) = (c.d_model as f64, c.d_k as f64);
        let head = target.and_then(Target::head).is_some();
        let slice = 4.0 * d * dk;
        let load_bytes = if head && !resident {
            [slice, slice, slice, 4.0 * d * d]
        } else {
            [0.0; 4]
        };
        let proj = 2.0 * rows * d * dk;
        let high_qkv_flops = if head { [proj; 3] } else { [0.0; 3] };
        let high_out_flops = if head {
            4.0 * (batch * seq * seq) as f64 * dk + 2.0 * rows * dk * d
        } else {
            0.0
        };
        Self {
            target,
            load_bytes,
            low_flops: [2.0 * rows * d * d; 3],
            high_qkv_flops,
            high_out_flops,
        }
    }

    pub fn transfer_bytes(&self) -> f64 {
        self.load_bytes.iter().sum()
    }

    pub fn high_flops(&self) -> f64 {
        self.high_qkv_flops.iter().sum::<f64>() + self.high_out_flops
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in StreamConfig::ALL {
            assert_eq!(s.name().parse::<StreamConfig>().unwrap(), s);
        }
    }

    #[test]
    fn calibration_hits_targets() {
        let c = ModelConfig::new(2, 4, 32, 16, 8);
        let cost = StepCost::new(&c, 1, 8, Some(Target::Head { layer: 1, head: 2 }), false);
        let tm = TimingModel::calibrated(&cost, 5.0, 8.0, 2.0, 0.0);
        assert!((tm.t_transfer(&cost) - 5.0).abs() < 1e-12);
        assert!((tm.t_low(&cost) - 8.0).abs() < 1e-12);
        assert!((tm.t_high(&cost) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn resident_bundle_moves_nothing() {
        let c = ModelConfig::new(2, 4, 32, 16, 8);
        let cost = StepCost::new(&c, 1, 8, Some(Target::Head { layer: 0, head: 0 }), true);
        assert_eq!(cost.transfer_bytes(), 0.0);
        assert!(cost.high_flops() > 0.0);
    }
}
