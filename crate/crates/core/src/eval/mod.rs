// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted tasks, ROC sweeps, faithfulness, precision ablations and reports.

pub mod diagnose;
pub mod faithful;
pub mod planted;
pub mod quant;
pub mod report;
pub mod roc;

pub use diagnose::{mantissa_diagnostic, underflow_diagnostic, MantissaReport, UnderflowReport};
pub use faithful::{faithfulness, faithfulness_with, MIN_DENOMINATOR};
pub use planted::{
    accuracy, generate_planted, logit_diffs, mean_logit_diff, PlantConfig, PlantedTask, TaskInfo,
    CONSTRUCTION_RETENTION,
};
pub use quant::{
    ablation_provider, incremental_quant_sweep, precision_ablation, write_precision_csv, write_quant_csv,
    PrecisionRow, QuantCurve, QuantStep,
};
pub use report::{epsilon_summary, resident_weight_bytes, EpsilonSummary, RunReport, SCHEMA_VERSION};
pub use roc::{
    classify, concordance_auc, pessimistic_auc, points_from_scores, roc_sweep, write_roc_csv, RocPoint, RocSweep,
};
