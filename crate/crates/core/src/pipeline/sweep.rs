//! One-axis ablation sweeps over β, σ² or k.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, label_hash};

use super::config::PipelineConfig;
use super::run::{run, MetricRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Beta,
    Sigma2,
    K,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Beta => "beta",
            Axis::Sigma2 => "sigma2",
            Axis::K => "k",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Axis::Beta),
            "sigma2" => Ok(Axis::Sigma2),
            "k" => Ok(Axis::K),
            other => Err(Error::Config(format!("unknown sweep axis `{other}` (beta, sigma2, k)"))),
        }
    }

    pub fn preset(self) -> Vec<f64> {
        match self {
            Axis::Beta => vec![0.0, 0.1, 0.5, 1.0, 2.5, 5.0, 10.0, 25.0],
            Axis::Sigma2 => vec![0.02, 0.03, 0.04, 0.05, 0.06, 0.2],
            Axis::K => vec![100.0, 200.0, 300.0, 400.0, 500.0],
        }
    }

    /// Sets this axis to `value` in a copy of `config`.
    pub fn apply(self, config: &PipelineConfig, value: f64) -> Result<PipelineConfig> {
        let mut c = config.clone();
        match self {
            Axis::Beta => c.detector.beta = value,
            Axis::Sigma2 => c.sampler.sigma2 = value,
            Axis::K => {
                if value < 1.0 || value.fract() != 0.0 || value > u32::MAX as f64 {
                    return Err(Error::Config(format!("k must be a positive integer, got {value}")));
                }
                c.sampler.k = value as usize;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Seed of one sweep run, derived from the global seed, the axis, the value
/// and the replicate index.
pub fn child_seed(global: u64, axis: Axis, value: f64, replicate: usize) -> u64 {
    derive_seed(global, &[label_hash(axis.name()), value.to_bits(), replicate as u64])
}

/// One long-form row: a single metric of the Dream-OOD score for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: f64,
    pub replicate: usize,
    pub seed: u64,
    pub metric: &'static str,
    pub score: f64,
}

pub const SWEEP_HEADER: &str = "axis,value,replicate,seed,metric,score";

pub const SWEEP_METRICS: [&str; 3] = ["fpr95", "auroc", "id_acc"];

/// Runs the full pipeline for every (value, replicate) pair. Runs are
/// independent and execute in parallel; rows come back in value-major order
/// regardless of scheduling.
pub fn sweep(config: &PipelineConfig, axis: Axis, values: &[f64], replicates: usize) -> Result<Vec<SweepRow>> {
    if values.is_empty() || replicates == 0 {
        return Err(Error::Config("sweep needs at least one value and one replicate".into()));
    }
    let jobs: Vec<(f64, usize)> = values
        .iter()
        .flat_map(|&v| (0..replicates).map(move |r| (v, r)))
        .collect();
    let per_job: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|&(value, replicate)| {
            let mut c = axis.apply(config, value)?;
            c.seed = child_seed(config.seed, axis, value, replicate);
            let out = run(&c)?;
            let row = dream_row(&out.rows)?;
            Ok(SWEEP_METRICS
                .iter()
                .zip([row.fpr95, row.auroc, row.id_acc])
                .map(|(&metric, score)| SweepRow {
                    axis,
                    value,
                    replicate,
                    seed: c.seed,
                    metric,
                    score,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_job.into_iter().flatten().collect())
}

fn dream_row(rows: &[MetricRow]) -> Result<&MetricRow> {
    rows.iter()
        .find(|r| r.method == "dream-ood")
        .ok_or_else(|| Error::invalid("run produced no dream-ood row"))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.axis.name(),
            r.value,
            r.replicate,
            r.seed,
            r.metric,
            r.score
        ));
    }
    s
}
