// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run reports, written as pretty-printed JSON.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::roc::RocPoint;
use crate::acdc::{Method, PolicyProvider};
use crate::error::Result;
use crate::model::{ComputationalGraph, Edge, Model, WeightSet};
use crate::numerics::Scalar;
use crate::pahq::{Target, WeightStore};
use crate::patching::{epsilon_precision, MetricKind, PromptPair};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSummary {
    pub edges: usize,
    pub mean: f64,
    pub max: f64,
    /// Edge with the largest gap.
    pub worst: Option<String>,
}

/// Precision-induced gap of every edge in `edges` under the policy the
/// provider picks for it.
pub fn epsilon_summary<S: Scalar>(
    edges: &[Edge],
    dataset: &[PromptPair],
    graph: &ComputationalGraph,
    model: &Model<S>,
    provider: &dyn PolicyProvider,
    metric: MetricKind,
) -> Result<EpsilonSummary> {
    let mut sum = 0.0;
    let mut max = 0.0;
    let mut worst = None;
    for e in edges {
        let eps = epsilon_precision(*e, dataset, graph, model, &provider.policy(e), metric)?;
        sum += eps;
        if worst.is_none() || eps > max {
            max = eps;
            worst = Some(e.to_string());
        }
    }
    Ok(EpsilonSummary {
        edges: edges.len(),
        mean: if edges.is_empty() { 0.0 } else { sum / edges.len() as f64 },
        max,
        worst,
    })
}

/// Weight bytes on the device while scoring with `method`: the FP32 model,
/// its FP8 image, or the FP8 image plus two resident head bundles.
pub fn resident_weight_bytes<S: Scalar>(method: Method, weights: &Arc<WeightSet<S>>) -> Result<usize> {
    let n = weights.element_count();
    Ok(match method {
        Method::Acdc => 4 * n,
        Method::Rtn8 => n,
        Method::Pahq => {
            let store = WeightStore::with_slots(Arc::clone(weights), 2)?;
            let heads = weights.config.n_heads;
            for head in 0..heads.min(2) {
                store.load(Target::Head { layer: 0, head })?;
            }
            store.telemetry().peak_device_bytes
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub method: String,
    pub seed: u64,
    /// Every setting the run used, flags and file merged.
    pub config: serde_json::Value,
    pub circuit: Vec<String>,
    pub iterations: usize,
    pub roc: Vec<RocPoint>,
    pub auc: Option<f64>,
    pub peak_resident_bytes: usize,
    pub epsilon: Option<EpsilonSummary>,
    pub runtime_sec: f64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl RunReport {
    pub fn new(command: &str, method: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            method: method.to_string(),
            seed,
            config,
            circuit: Vec::new(),
            iterations: 0,
            roc: Vec::new(),
            auc: None,
            peak_resident_bytes: 0,
            epsilon: None,
            runtime_sec: 0.0,
            extra: serde_json::Value::Null,
        }
    }

    /// Zeroes the wall-clock fields.
    pub fn deterministic(mut self) -> Self {
        self.runtime_sec = 0.0;
        strip_wall_clock(&mut self.extra);
        self
    }

    pub fn write(&self, mut writer: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut writer, self)?;
        writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(reader: impl std::io::Read) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }
}

/// Any object key starting with `wall` is a wall-clock measurement.
fn strip_wall_clock(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, x) in map.iter_mut() {
                if k.starts_with("wall") {
                    *x = serde_json::json!(0.0);
                } else {
                    strip_wall_clock(x);
                }
            }
        }
        serde_json::Value::Array(xs) => xs.iter_mut().for_each(strip_wall_clock),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init::random_weights, ModelConfig};

    #[test]
    fn round_trip_and_wall_clock() {
        let mut r = RunReport::new("run-acdc", "PAHQ", 7, serde_json::json!({"tau": 0.01}));
        r.runtime_sec = 3.5;
        r.extra = serde_json::json!({"rows": [{"wall_per_step": 0.2, "simulated": 0.1}]});
        let mut buf = Vec::new();
        r.write(&mut buf).unwrap();
        assert_eq!(RunReport::read(buf.as_slice()).unwrap(), r);
        let d = r.deterministic();
        assert_eq!(d.runtime_sec, 0.0);
        assert_eq!(d.extra["rows"][0]["wall_per_step"], 0.0);
        assert_eq!(d.extra["rows"][0]["simulated"], 0.1);
    }

    #[test]
    fn resident_bytes_by_method() {
        let w = Arc::new(random_weights::<f32>(ModelConfig::new(2, 4, 16, 10, 6), 1, 0.2));
        let n = w.element_count();
        assert_eq!(resident_weight_bytes(Method::Acdc, &w).unwrap(), 4 * n);
        assert_eq!(resident_weight_bytes(Method::Rtn8, &w).unwrap(), n);
        let c = &w.config;
        let bundle = 4 * (3 * c.d_model * c.d_k + c.d_model * c.d_model);
        assert_eq!(resident_weight_bytes(Method::Pahq, &w).unwrap(), n + 2 * bundle);
    }
}
