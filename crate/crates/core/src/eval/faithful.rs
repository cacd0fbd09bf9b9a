// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use super::planted::{mean_logit_diff, PlantedTask};
use crate::error::{Error, Result};
use crate::model::{ComputationalGraph, Edge};
use crate::numerics::Scalar;
use crate::pahq::PrecisionPolicy;

/// Smallest usable `|M_model - M_corrupt|`.
pub const MIN_DENOMINATOR: f64 = 1e-9;

/// `(M_circuit - M_corrupt) / (M_model - M_corrupt)` at full precision, where
/// `M` is the mean logit difference with every edge outside `circuit`
/// corrupted (circuit), none (model) or all of them (corrupt).
pub fn faithfulness<S: Scalar>(task: &PlantedTask<S>, circuit: &ComputationalGraph) -> Result<f64> {
    faithfulness_with(task, circuit, &PrecisionPolicy::full_precision())
}

pub fn faithfulness_with<S: Scalar>(
    task: &PlantedTask<S>,
    circuit: &ComputationalGraph,
    policy: &PrecisionPolicy,
) -> Result<f64> {
    let g = task.graph();
    if circuit.config() != g.config() {
        return Err(Error::Shape("circuit and task disagree on the model config".into()));
    }
    let keep: BTreeSet<Edge> = circuit.present_edges().collect();
    let m = |keep: Option<&BTreeSet<Edge>>| mean_logit_diff(&g, &task.model, &task.dataset, policy, keep);
    let model = m(None)?;
    let corrupt = m(Some(&BTreeSet::new()))?;
    let denom = model - corrupt;
    if denom.abs() < MIN_DENOMINATOR {
        return Err(Error::DegenerateDenominator(denom.abs()));
    }
    Ok((m(Some(&keep))? - corrupt) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::planted::{generate_planted, PlantConfig};

    #[test]
    fn endpoints_and_plant() {
        let t = generate_planted::<f32>(&PlantConfig::default(), 2, 1.0).unwrap();
        let g = t.graph();
        assert_eq!(faithfulness(&t, &g).unwrap(), 1.0);
        assert_eq!(faithfulness(&t, &g.with_mask([].iter())).unwrap(), 0.0);
        let f = faithfulness(&t, &g.with_mask(t.ground_truth.iter())).unwrap();
        assert!(f >= 0.9, "{f}");
    }

    #[test]
    fn identical_prompts_are_degenerate() {
        let mut t = generate_planted::<f32>(&PlantConfig::default(), 2, 1.0).unwrap();
        for p in &mut t.dataset {
            p.corrupt = p.clean.clone();
        }
        let g = t.graph();
        assert!(matches!(faithfulness(&t, &g), Err(Error::DegenerateDenominator(_))));
    }
}
