use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::FastRateGrid;
use crate::error::{Error, Result};
use crate::fl::TrainConfig;
use crate::meta::{Domain, MetaSpec};
use crate::model::{EvalLoss, LossSpec};
use crate::tables::LossBinning;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub meta: MetaSpec,
    pub k: usize,
    pub n: usize,
    pub train: TrainConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<QuantizationConfig>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub evaluation: EvalLoss,
}

impl LossConfig {
    pub fn spec(&self, domain: Domain) -> LossSpec {
        match self.evaluation {
            EvalLoss::ZeroOne => LossSpec::classification(domain),
            ev => LossSpec::quadratic(domain, ev),
        }
    }
}

/// When the participation bits are redrawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VProtocol {
    /// Once per supersample draw.
    #[default]
    WithZ,
    /// Once per membership draw.
    WithU,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalModels {
    #[default]
    FinalRound,
    FirstRound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub z_draws: usize,
    pub u_draws: usize,
    pub v_protocol: VProtocol,
    pub average_over_j: bool,
    pub level_bins: u32,
    pub diff_bins: u32,
    pub miller_madow: bool,
    pub local_models: LocalModels,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            z_draws: 3,
            u_draws: 15,
            v_protocol: VProtocol::WithZ,
            average_over_j: true,
            level_bins: 64,
            diff_bins: 129,
            miller_madow: false,
            local_models: LocalModels::FinalRound,
        }
    }
}

impl EstimationConfig {
    pub fn binning(&self) -> LossBinning {
        LossBinning {
            level_bins: self.level_bins,
            diff_bins: self.diff_bins,
        }
    }
}

/// Privacy levels of the aggregation step and of the local algorithms. A
/// single local value applies to every client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpParams {
    pub eps_global: f64,
    pub eps_local: Vec<f64>,
}

impl DpParams {
    pub fn local_for(&self, k: usize) -> Vec<f64> {
        if self.eps_local.len() == 1 {
            vec![self.eps_local[0]; k]
        } else {
            self.eps_local.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub sqrt_ecmi: bool,
    pub fastrate: bool,
    pub bregman: bool,
    pub comm: bool,
    pub convex_smooth: bool,
    pub heterogeneity_kl: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpParams>,
    pub sigma_part: f64,
    pub sigma_oos: f64,
    pub sigma_comm: f64,
    pub sigma_kl: f64,
    pub grid: FastRateGrid,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            sqrt_ecmi: true,
            fastrate: true,
            bregman: false,
            comm: false,
            convex_smooth: false,
            heterogeneity_kl: false,
            dp: None,
            sigma_part: 1.0,
            sigma_oos: 1.0,
            sigma_comm: 1.0,
            sigma_kl: 1.0,
            grid: FastRateGrid::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationConfig {
    pub bits: u32,
    /// Half-width of the quantization cube; defaults to the domain radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return Err(Error::param(format!("K and n must be >= 1, got K={}, n={}", self.k, self.n)));
        }
        let est = &self.estimation;
        if est.z_draws == 0 || est.u_draws == 0 {
            return Err(Error::param("z_draws and u_draws must be >= 1"));
        }
        est.binning().validate()?;
        self.train.validate()?;
        let b = &self.bounds;
        for (name, s) in [
            ("sigma_part", b.sigma_part),
            ("sigma_oos", b.sigma_oos),
            ("sigma_comm", b.sigma_comm),
            ("sigma_kl", b.sigma_kl),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::param(format!("{name} must be > 0, got {s}")));
            }
        }
        b.grid.values()?;
        if (b.bregman || b.convex_smooth || b.comm) && self.quantization.is_none() {
            return Err(Error::Config(
                "bregman, convex_smooth and comm bounds need a quantization section".into(),
            ));
        }
        if let Some(q) = &self.quantization {
            if q.bits == 0 {
                return Err(Error::param("quantization bits must be >= 1"));
            }
            if let Some(r) = q.radius {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::param(format!("quantization radius must be > 0, got {r}")));
                }
            }
        }
        if let Some(dp) = &b.dp {
            if dp.eps_local.len() != 1 && dp.eps_local.len() != self.k {
                return Err(Error::structural(format!(
                    "dp.eps_local has {} entries; give one value or K = {}",
                    dp.eps_local.len(),
                    self.k
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "meta": {"family": "gaussian-mean-estimation", "dim": 2, "tau": 0.5, "sigma": 0.5, "domain_radius": 3.0},
        "k": 4, "n": 5,
        "train": {"optimizer": "closed-form-erm", "rounds": 1, "model": {"kind": "mean-vector"}},
        "loss": {"evaluation": "bregman-squared"},
        "seed": 1
    }"#;

    #[test]
    fn defaults_follow_the_protocol() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.estimation.z_draws, 3);
        assert_eq!(cfg.estimation.u_draws, 15);
        assert_eq!(cfg.estimation.v_protocol, VProtocol::WithZ);
        assert_eq!(cfg.train.local_epochs, 5);
        assert!(cfg.bounds.sqrt_ecmi && cfg.bounds.fastrate);
        let again: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replacen("\"seed\": 1", "\"seed\": 1, \"colour\": 3", 1);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
        let text = MINIMAL.replacen("\"rounds\": 1", "\"rounds\": 1, \"momentum\": 0.9", 1);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn zero_rounds_is_parameter_error() {
        let text = MINIMAL.replacen("\"rounds\": 1", "\"rounds\": 0", 1);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Parameter(_))));
    }

    #[test]
    fn section_bounds_need_quantization() {
        let text = MINIMAL.replacen("\"seed\": 1", "\"seed\": 1, \"bounds\": {\"bregman\": true}", 1);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
    }
}
