// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::exec::{ExecOptions, Pipeline, StepSpec};
use super::sim::simulate;
use super::{closed_form, StepCost, StreamConfig, TimingModel};
use crate::error::{Error, Result};
use crate::model::{layer_norm, Model};
use crate::numerics::Scalar;
use crate::pahq::{PrecisionPolicy, Target};
use crate::tensor::Matrix;

/// A sequence of attention steps plus the device they run on.
#[derive(Debug, Clone)]
pub struct Workload<S: Scalar> {
    pub model: Model<S>,
    pub steps: Vec<StepSpec<S>>,
    pub timing: TimingModel,
}

impl<S: Scalar> Workload<S> {
    /// `n_steps` steps cycling over every head, each with a fresh target,
    /// on a device calibrated so one step takes the given durations.
    #[allow(clippy::too_many_arguments)]
    pub fn calibrated(
        model: Model<S>,
        n_steps: usize,
        batch: usize,
        seq: usize,
        seed: u64,
        t_transfer: f64,
        t_low: f64,
        t_high: f64,
        overhead: f64,
    ) -> Result<Self> {
        let c = *model.config();
        if n_steps == 0 || batch == 0 || seq == 0 || seq > c.seq_len {
            return Err(Error::InvalidArgument(format!(
                "workload needs steps, batch and 1..={} positions",
                c.seq_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let inputs: Vec<Arc<Vec<Matrix<S>>>> = (0..c.n_layers)
            .map(|layer| {
                let lw = &model.weights().layers[layer];
                let normed = (0..c.n_heads)
                    .map(|_| {
                        let x = Matrix::from_fn(batch * seq, c.d_model, |_, _| S::of(normal.sample(&mut rng)));
                        layer_norm(&x, &lw.ln_gamma, &lw.ln_beta)
                    })
                    .collect();
                Arc::new(normed)
            })
            .collect();
        let heads = c.n_layers * c.n_heads;
        let steps = (0..n_steps)
            .map(|i| {
                let h = i % heads;
                let (layer, head) = (h / c.n_heads, h % c.n_heads);
                StepSpec {
                    policy: PrecisionPolicy::pahq_base().with_target(Some(Target::Head { layer, head })),
                    layer,
                    normed: Arc::clone(&inputs[layer]),
                    batch,
                    seq,
                }
            })
            .collect();
        let unit = StepCost::new(&c, batch, seq, Some(Target::Head { layer: 0, head: 0 }), false);
        let timing = TimingModel::calibrated(&unit, t_transfer, t_low, t_high, overhead);
        timing.validate()?;
        Ok(Self { model, steps, timing })
    }

    pub fn costs(&self) -> Vec<StepCost> {
        self.steps
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let resident = t > 0 && s.target().is_some() && self.steps[t - 1].target() == s.target();
                StepCost::new(self.model.config(), s.batch, s.seq, s.target(), resident)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub streams: StreamConfig,
    /// Median wall-clock seconds per step over the repeats.
    pub wall_per_step: f64,
    /// Simulated seconds per step.
    pub simulated_per_step: f64,
    /// Closed-form seconds for an isolated step.
    pub closed_form_step: f64,
}

/// Runs the workload under every stream configuration `repeats` times with
/// device emulation and reports median per-step times.
pub fn ablate<S: Scalar>(w: &Workload<S>, repeats: usize, configs: &[StreamConfig]) -> Result<Vec<AblationRow>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be positive".into()));
    }
    let costs = w.costs();
    let n = w.steps.len() as f64;
    let mut rows = Vec::with_capacity(configs.len());
    for &s in configs {
        let opts = ExecOptions {
            device: Some(w.timing),
            watchdog: Duration::from_secs(60),
            ..Default::default()
        };
        let mut walls = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let mut p = Pipeline::new(w.model.clone(), s, opts.clone())?;
            let t0 = Instant::now();
            p.run(&w.steps)?;
            walls.push(t0.elapsed().as_secs_f64() / n);
        }
        walls.sort_by(f64::total_cmp);
        rows.push(AblationRow {
            streams: s,
            wall_per_step: walls[walls.len() / 2],
            simulated_per_step: simulate(&costs, &w.timing, s).makespan / n,
            closed_form_step: closed_form(&costs[0], &w.timing, s),
        });
    }
    Ok(rows)
}
