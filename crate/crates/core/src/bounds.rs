//! Generalization bounds evaluated from estimated (conditional) mutual
//! information and empirical quantities.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::{CmiEstimate, MiEstimate};

/// MI estimates feeding the bounds. Participation tables are indexed by
/// client `i`; out-of-sample tables by `i * n + j` and are conditioned on
/// the participation bit `v_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmiEstimates {
    pub k: usize,
    pub n: usize,
    /// `I(L̄⁺_i; V_i)`.
    pub part_level: Option<Vec<MiEstimate>>,
    /// `I(ΔL̄_i; V_i)`.
    pub part_diff: Option<Vec<MiEstimate>>,
    /// `I(L^{i+}_j; U | V_i)`.
    pub oos_level: Option<Vec<CmiEstimate<u8>>>,
    /// `I(ΔL^i_j; U | V_i)`.
    pub oos_diff: Option<Vec<CmiEstimate<u8>>>,
    /// `I(W^q_i; V_i)` for quantized local models.
    pub local_part: Option<Vec<MiEstimate>>,
    /// `I(W^q_i; U | V_i)`.
    pub local_oos: Option<Vec<CmiEstimate<u8>>>,
    pub warnings: Vec<String>,
}

impl CmiEstimates {
    pub fn empty(k: usize, n: usize) -> Self {
        CmiEstimates {
            k,
            n,
            part_level: None,
            part_diff: None,
            oos_level: None,
            oos_diff: None,
            local_part: None,
            local_oos: None,
            warnings: Vec::new(),
        }
    }

    /// Every table filled with the same value; each conditional table has a
    /// single stratum per bit value with weight one half.
    pub fn uniform(k: usize, n: usize, value: f64) -> Self {
        let mi = || MiEstimate {
            value,
            samples: 2,
            x_support: 2,
            y_support: 2,
            degenerate: false,
            bias: 0.0,
        };
        let cmi = || CmiEstimate {
            value,
            samples: 4,
            strata: (0..2u8)
                .map(|v| crate::mi::Stratum {
                    z: v,
                    weight: 0.5,
                    estimate: mi(),
                })
                .collect(),
        };
        CmiEstimates {
            k,
            n,
            part_level: Some(vec![mi(); k]),
            part_diff: Some(vec![mi(); k]),
            oos_level: Some(vec![cmi(); k * n]),
            oos_diff: Some(vec![cmi(); k * n]),
            local_part: Some(vec![mi(); k]),
            local_oos: Some(vec![cmi(); k * n]),
            warnings: Vec::new(),
        }
    }

    fn require<'a, T>(table: &'a Option<Vec<T>>, what: &str, len: usize) -> Result<&'a [T]> {
        let t = table
            .as_deref()
            .ok_or_else(|| Error::capability(format!("the {what} MI table was not estimated")))?;
        if t.len() != len {
            return Err(Error::structural(format!(
                "{what} table has {} entries, expected {len}",
                t.len()
            )));
        }
        Ok(t)
    }
}

/// Loss-difference square-root bound on the total generalization gap.
pub fn sqrt_ecmi_bound(e: &CmiEstimates) -> Result<f64> {
    let (k, n) = (e.k as f64, e.n as f64);
    let part = CmiEstimates::require(&e.part_diff, "participation loss-difference", e.k)?;
    let oos = CmiEstimates::require(&e.oos_diff, "out-of-sample loss-difference", e.k * e.n)?;
    let p: f64 = part.iter().map(|m| (2.0 * m.value).sqrt()).sum::<f64>() / k;
    let o: f64 = oos
        .iter()
        .map(|c| {
            c.strata
                .iter()
                .map(|s| s.weight * (2.0 * s.estimate.value).sqrt())
                .sum::<f64>()
        })
        .sum::<f64>()
        / (k * n);
    Ok(p + o)
}

/// Largest `t` in `(0, ln2/2]` with `e^{-2 t c} + e^{2t} <= 2`, by bisection.
/// The returned point is always on the feasible side of the root.
pub fn solve_c_max(c_big: f64, tol: f64) -> Result<f64> {
    if !(c_big > 1.0) || !c_big.is_finite() {
        return Err(Error::param(format!("c_max needs C > 1, got {c_big}")));
    }
    if !(tol > 0.0) {
        return Err(Error::param(format!("bisection tolerance must be > 0, got {tol}")));
    }
    let f = |t: f64| (-2.0 * t * c_big).exp() + (2.0 * t).exp() - 2.0;
    let (mut lo, mut hi) = (0.0f64, LN_2 / 2.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastRateConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl FastRateConstants {
    pub fn satisfies_constraints(&self, slack: f64) -> bool {
        let g = |a: f64, b: f64| (-2.0 * a * b).exp() + (2.0 * a).exp() <= 2.0 + slack;
        self.c1 > 1.0 && self.c2 > 1.0 && self.c3 > 0.0 && self.c4 > 0.0 && g(self.c3, self.c1) && g(self.c4, self.c2)
    }
}

/// Log grid for `C1, C2 = 1 + x` with `x` from `min_excess` to `max_excess`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FastRateGrid {
    pub points: usize,
    pub min_excess: f64,
    pub max_excess: f64,
    pub tol: f64,
}

impl Default for FastRateGrid {
    fn default() -> Self {
        FastRateGrid {
            points: 60,
            min_excess: 1e-3,
            max_excess: 999.0,
            tol: 1e-10,
        }
    }
}

impl FastRateGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.points < 2 || !(self.min_excess > 0.0) || !(self.max_excess > self.min_excess) {
            return Err(Error::param(format!("invalid constant grid {self:?}")));
        }
        let (a, b) = (self.min_excess.log10(), self.max_excess.log10());
        let last = (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|p| 1.0 + 10f64.powf(a + (b - a) * p as f64 / last))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastRateResult {
    pub risk_bound: f64,
    pub gap_bound: f64,
    pub constants: FastRateConstants,
}

/// Grid search of the fast-rate risk bound. Ties keep the lowest `C1`,
/// then the lowest `C2`.
pub fn fastrate_bound(e: &CmiEstimates, emp_risk: f64, grid: &FastRateGrid) -> Result<FastRateResult> {
    if !(0.0..=1.0).contains(&emp_risk) {
        return Err(Error::param(format!("empirical risk must be in [0,1], got {emp_risk}")));
    }
    let (k, n) = (e.k as f64, e.n as f64);
    let part = CmiEstimates::require(&e.part_level, "participation loss", e.k)?;
    let oos = CmiEstimates::require(&e.oos_level, "out-of-sample loss", e.k * e.n)?;
    let sp: f64 = part.iter().map(|m| m.value).sum();
    let so: f64 = oos.iter().map(|c| c.value).sum();
    let cs = grid.values()?;
    let ts = cs
        .iter()
        .map(|&c| solve_c_max(c, grid.tol))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(f64, FastRateConstants)> = None;
    for (a, &c1) in cs.iter().enumerate() {
        for (b, &c2) in cs.iter().enumerate() {
            let (c3, c4) = (ts[a], ts[b]);
            let obj = c1 * c2 * emp_risk + sp / (c3 * k) + c1 * so / (c4 * k * n);
            if best.is_none_or(|(v, _)| obj < v) {
                best = Some((obj, FastRateConstants { c1, c2, c3, c4 }));
            }
        }
    }
    let (risk_bound, constants) = best.expect("grid has at least four points");
    Ok(FastRateResult {
        risk_bound,
        gap_bound: risk_bound - emp_risk,
        constants,
    })
}

fn dp_term(eps: f64) -> f64 {
    eps.min(eps.exp_m1() * eps)
}

/// Generalization guarantee of `eps'`-DP aggregation with `eps_i`-DP local
/// algorithms.
pub fn dp_bound(eps_global: f64, eps_local: &[f64], k: usize, n: usize) -> Result<f64> {
    if eps_local.len() != k {
        return Err(Error::structural(format!(
            "{} local epsilons for K = {k} clients",
            eps_local.len()
        )));
    }
    if k == 0 || n == 0 {
        return Err(Error::param("K and n must be >= 1"));
    }
    if let Some(bad) = std::iter::once(&eps_global).chain(eps_local).find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(Error::param(format!("privacy parameters must be finite and >= 0, got {bad}")));
    }
    let (kf, nf) = (k as f64, n as f64);
    let local: f64 = eps_local.iter().map(|&e| (2.0 * dp_term(e) / nf).sqrt()).sum();
    Ok((2.0 * dp_term(eps_global) / kf).sqrt() + local / kf)
}

/// Average-of-local-models bound for Bregman losses.
pub fn bregman_aggregation_bound(e: &CmiEstimates, sigma_part: f64, sigma_oos: f64) -> Result<f64> {
    check_sigma(sigma_part)?;
    check_sigma(sigma_oos)?;
    let (k, n) = (e.k as f64, e.n as f64);
    let part = CmiEstimates::require(&e.local_part, "local-model participation", e.k)?;
    let oos = CmiEstimates::require(&e.local_oos, "local-model out-of-sample", e.k * e.n)?;
    let sp2 = sigma_part * sigma_part;
    let so2 = sigma_oos * sigma_oos;
    let p: f64 = part.iter().map(|m| (2.0 * sp2 * m.value).sqrt()).sum();
    let o: f64 = oos.iter().map(|c| (2.0 * so2 * c.value).sqrt()).sum();
    Ok(p / (k * k) + o / (k * k * n))
}

/// [`bregman_aggregation_bound`] with every MI replaced by its `B ln 2` cap.
pub fn comm_constraint_bound(bits: u32, sigma: f64, k: usize, n: usize) -> Result<f64> {
    if bits == 0 {
        return Err(Error::param("the bit budget must be >= 1"));
    }
    if k == 0 || n == 0 {
        return Err(Error::param("K and n must be >= 1"));
    }
    check_sigma(sigma)?;
    let term = (2.0 * sigma * sigma * f64::from(bits) * LN_2).sqrt() / k as f64;
    Ok(term + term)
}

pub fn gamma(alpha: f64, smoothness: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= smoothness) {
        return Err(Error::param(format!("need 0 < alpha <= L, got alpha={alpha}, L={smoothness}")));
    }
    Ok(2.0 * smoothness / (alpha * LN_2))
}

/// Out-of-sample bound for smooth, strongly convex losses and interpolating
/// local learners. `train_losses[i * n + j]` is the mean training loss of the
/// global model on slot `(i, j)`.
pub fn convex_smooth_bound(
    e: &CmiEstimates,
    train_losses: &[f64],
    alpha: f64,
    smoothness: f64,
    interpolating: bool,
) -> Result<f64> {
    if !interpolating {
        return Err(Error::capability(
            "local learners did not interpolate their training sets",
        ));
    }
    let g = gamma(alpha, smoothness)?;
    let (k, n) = (e.k as f64, e.n as f64);
    let oos = CmiEstimates::require(&e.local_oos, "local-model out-of-sample", e.k * e.n)?;
    if train_losses.len() != oos.len() {
        return Err(Error::structural(format!(
            "{} training losses for {} slots",
            train_losses.len(),
            oos.len()
        )));
    }
    let linear: f64 = oos.iter().map(|c| c.value).sum();
    let cross: f64 = oos
        .iter()
        .zip(train_losses)
        .map(|(c, &l)| (l.max(0.0) * c.value).sqrt())
        .sum();
    Ok(g / (k * k * k * n) * linear + 2.0 * g.sqrt() / (k * k * n) * cross)
}

/// Participation term driven by per-client KL divergences to the population.
pub fn heterogeneity_kl_bound(kls: &[f64], sigma: f64, k: usize) -> Result<f64> {
    if kls.len() != k {
        return Err(Error::structural(format!("{} KL values for K = {k}", kls.len())));
    }
    check_sigma(sigma)?;
    if let Some(bad) = kls.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::domain(format!("KL divergence must be >= 0, got {bad}")));
    }
    Ok(kls.iter().map(|kl| (2.0 * sigma * sigma * kl).sqrt()).sum::<f64>() / k as f64)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("sub-Gaussian proxy must be > 0, got {sigma}")))
    }
}

/// Which estimated gap a bound is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapTarget {
    Total,
    Participation,
    OutOfSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub name: String,
    pub value: f64,
    pub target: GapTarget,
    /// `value >= estimated gap`; absent when the bound could not be evaluated.
    pub holds: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<FastRateConstants>,
    pub inputs: BTreeMap<String, f64>,
    pub n_mi_samples: usize,
    pub notes: Vec<String>,
}
