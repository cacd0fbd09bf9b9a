// SPDX-License-Identifier: MIT OR Apache-2.0

//! Settings from flags and an optional TOML file. A flag wins over the file,
//! the file over the defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use circuitquant::acdc::{threshold_grid, Method, PruneConfig, ScoreMode, SweepScope};
use circuitquant::patching::MetricKind;
use circuitquant::scheduler::StreamConfig;

use crate::fail::{CliResult, Failure};

/// Default planted weight scale: small enough that the planted head's
/// contribution rounds to zero in FP8.
pub const DEFAULT_SIGNAL_SCALE: f64 = 1.0 / 4096.0;

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML file with any of the settings below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// acdc | rtn8 | pahq
    #[arg(long, global = true)]
    pub method: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub delta: Option<f64>,
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub eps: Option<f64>,
    /// kl | logitdiff
    #[arg(long, global = true)]
    pub metric: Option<String>,
    /// loss | act
    #[arg(long, global = true)]
    pub score_mode: Option<String>,
    /// none | load | compute | both
    #[arg(long, global = true)]
    pub streams: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// lo,hi,n
    #[arg(long, global = true)]
    pub thresholds: Option<String>,
    /// 4 | 8 | 16
    #[arg(long, global = true)]
    pub precision: Option<u32>,
    /// heads | components | all
    #[arg(long, global = true)]
    pub scope: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub signal_scale: Option<f64>,
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Zero every wall-clock field of the report.
    #[arg(long, global = true)]
    pub deterministic_report: bool,
}

/// Keys accepted in the config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub method: Option<String>,
    pub tau: Option<f64>,
    pub delta: Option<f64>,
    pub max_steps: Option<usize>,
    pub eps: Option<f64>,
    pub metric: Option<String>,
    pub score_mode: Option<String>,
    pub streams: Option<String>,
    pub seed: Option<u64>,
    pub weights: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub thresholds: Option<String>,
    pub precision: Option<u32>,
    pub scope: Option<String>,
    pub signal_scale: Option<f64>,
    pub repeats: Option<usize>,
    pub deterministic_report: Option<bool>,
}

impl FileConfig {
    /// TOML, or a JSON run report whose `config` is reused.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        let bad = |e: &dyn std::fmt::Display| Failure::Config(format!("{}: {e}", path.display()));
        if path.extension().is_some_and(|x| x == "json") {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
            let cfg = v.get("config").cloned().unwrap_or(v);
            return serde_json::from_value(cfg).map_err(|e| bad(&e));
        }
        toml::from_str(&text).map_err(|e| bad(&e))
    }
}

/// Every setting after merging, as recorded in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub method: String,
    pub tau: f64,
    pub delta: Option<f64>,
    pub max_steps: usize,
    pub eps: f64,
    pub metric: String,
    pub score_mode: String,
    pub streams: String,
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub thresholds: String,
    pub precision: Option<u32>,
    pub scope: String,
    pub signal_scale: f64,
    pub repeats: usize,
    pub deterministic_report: bool,
}

fn parse<T: std::str::FromStr<Err = String>>(field: &str, v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|e| format!("{field}: {e}"))
}

impl Resolved {
    pub fn merge(flags: &Flags, file: &FileConfig) -> Self {
        macro_rules! pick {
            ($f:ident, $default:expr) => {
                flags.$f.clone().or_else(|| file.$f.clone()).unwrap_or_else(|| $default)
            };
        }
        Self {
            method: pick!(method, "pahq".into()),
            tau: pick!(tau, 0.01),
            delta: flags.delta.or(file.delta),
            max_steps: pick!(max_steps, 10),
            eps: pick!(eps, 0.0),
            metric: pick!(metric, "logitdiff".into()),
            score_mode: pick!(score_mode, "loss".into()),
            streams: pick!(streams, "both".into()),
            seed: pick!(seed, 0),
            weights: flags.weights.clone().or_else(|| file.weights.clone()),
            dataset: flags.dataset.clone().or_else(|| file.dataset.clone()),
            out: pick!(out, PathBuf::from("out")),
            thresholds: pick!(thresholds, "0.001,3.16,21".into()),
            precision: flags.precision.or(file.precision),
            scope: pick!(scope, "heads".into()),
            signal_scale: pick!(signal_scale, DEFAULT_SIGNAL_SCALE),
            repeats: pick!(repeats, 10),
            deterministic_report: flags.deterministic_report || file.deterministic_report.unwrap_or(false),
        }
    }

    /// Reads the file named by `--config`, if any, and merges.
    pub fn from_flags(flags: &Flags) -> CliResult<Self> {
        let file = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let r = Self::merge(flags, &file);
        r.validate()?;
        Ok(r)
    }

    /// Every problem, each prefixed by its field name.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |r: Result<(), String>| {
            if let Err(e) = r {
                v.push(e);
            }
        };
        check(parse::<Method>("method", &self.method).map(drop));
        check(parse::<MetricKind>("metric", &self.metric).map(drop));
        check(parse::<ScoreMode>("score_mode", &self.score_mode).map(drop));
        check(parse::<StreamConfig>("streams", &self.streams).map(drop));
        check(parse::<SweepScope>("scope", &self.scope).map(drop));
        check(self.grid().map(drop));
        if let Some(b) = self.precision {
            if ![4, 8, 16].contains(&b) {
                check(Err(format!("precision: expected 4, 8 or 16, got {b}")));
            }
        }
        if !(self.signal_scale.is_finite() && self.signal_scale > 0.0) {
            check(Err(format!("signal_scale: must be positive, got {}", self.signal_scale)));
        }
        if self.repeats == 0 {
            check(Err("repeats: must be at least 1".into()));
        }
        let numeric = PruneConfig {
            tau: self.tau,
            delta: self.delta,
            max_steps: self.max_steps,
            change_rate_eps: self.eps,
            ..PruneConfig::default()
        };
        for e in numeric.violations() {
            check(Err(e));
        }
        v
    }

    pub fn validate(&self) -> CliResult<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Failure::Config(v.join("; ")))
        }
    }

    pub fn method(&self) -> Method {
        self.method.parse().expect("validated")
    }

    pub fn streams(&self) -> StreamConfig {
        self.streams.parse().expect("validated")
    }

    fn prune_unchecked(&self) -> Result<PruneConfig, String> {
        Ok(PruneConfig {
            tau: self.tau,
            delta: self.delta,
            max_steps: self.max_steps,
            change_rate_eps: self.eps,
            metric: parse("metric", &self.metric)?,
            score_mode: parse("score_mode", &self.score_mode)?,
            scope: parse("scope", &self.scope)?,
        })
    }

    pub fn prune(&self) -> PruneConfig {
        self.prune_unchecked().expect("validated")
    }

    pub fn grid(&self) -> Result<Vec<f64>, String> {
        let parts: Vec<&str> = self.thresholds.split(',').map(str::trim).collect();
        let bad = || format!("thresholds: expected lo,hi,n, got `{}`", self.thresholds);
        let [lo, hi, n] = parts.as_slice() else {
            return Err(bad());
        };
        let (lo, hi, n) = (
            lo.parse::<f64>().map_err(|_| bad())?,
            hi.parse::<f64>().map_err(|_| bad())?,
            n.parse::<usize>().map_err(|_| bad())?,
        );
        threshold_grid(lo, hi, n).map_err(|e| format!("thresholds: {e}"))
    }

    pub fn bits(&self) -> Vec<u32> {
        match self.precision {
            Some(b) => vec![b],
            None => vec![16, 8, 4],
        }
    }
}
