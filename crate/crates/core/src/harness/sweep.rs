use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{run_experiment_with, ExperimentReport, RunOptions};
use crate::error::{Error, Result};
use crate::meta::MetaDistribution;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "K")]
    K,
    #[serde(rename = "n")]
    N,
}

impl Axis {
    pub fn label(&self) -> &'static str {
        match self {
            Axis::K => "K",
            Axis::N => "n",
        }
    }

    pub fn apply(&self, cfg: &ExperimentConfig, value: usize) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            Axis::K => c.k = value,
            Axis::N => c.n = value,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: Axis,
    pub values: Vec<usize>,
    pub reports: Vec<ExperimentReport>,
}

/// One experiment per axis value. Seeds are rooted at `(seed, K, n)`, so
/// every point is namespaced by its value and a one-point sweep reproduces
/// the plain experiment.
pub fn run_sweep(cfg: &ExperimentConfig, axis: Axis, values: &[usize], opts: &RunOptions) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::param("sweep needs at least one value"));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param(format!("sweep values must be strictly ascending, got {values:?}")));
    }
    let meta = MetaDistribution::new(cfg.meta.clone())?;
    let reports = values
        .iter()
        .map(|&v| {
            let point = axis.apply(cfg, v);
            point.validate()?;
            run_experiment_with(&point, &meta, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        axis,
        values: values.to_vec(),
        reports,
    })
}
