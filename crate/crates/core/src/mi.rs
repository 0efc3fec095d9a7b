//! Plug-in (maximum-likelihood) mutual information for discrete samples.
//!
//! Counts live in ordered maps so the summation order, and hence every bit
//! of the result, depends only on the multiset of samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Nats.
    pub value: f64,
    pub samples: usize,
    pub x_support: usize,
    pub y_support: usize,
    /// Fewer than two samples, or a constant variable.
    pub degenerate: bool,
    /// First-order plug-in bias, `(|X|-1)(|Y|-1) / (2N)`.
    pub bias: f64,
}

impl MiEstimate {
    fn empty() -> Self {
        MiEstimate {
            value: 0.0,
            samples: 0,
            x_support: 0,
            y_support: 0,
            degenerate: true,
            bias: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum<Z> {
    pub z: Z,
    pub weight: f64,
    pub estimate: MiEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmiEstimate<Z> {
    pub value: f64,
    pub samples: usize,
    /// Observed strata in ascending `z` order.
    pub strata: Vec<Stratum<Z>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiOptions {
    pub miller_madow: bool,
}

pub fn plugin_mi<X: Ord, Y: Ord>(samples: &[(X, Y)]) -> MiEstimate {
    plugin_mi_with(samples, MiOptions::default())
}

pub fn plugin_mi_with<X: Ord, Y: Ord>(samples: &[(X, Y)], opts: MiOptions) -> MiEstimate {
    if samples.is_empty() {
        return MiEstimate::empty();
    }
    let mut joint: BTreeMap<(&X, &Y), usize> = BTreeMap::new();
    let mut px: BTreeMap<&X, usize> = BTreeMap::new();
    let mut py: BTreeMap<&Y, usize> = BTreeMap::new();
    for (x, y) in samples {
        *joint.entry((x, y)).or_default() += 1;
        *px.entry(x).or_default() += 1;
        *py.entry(y).or_default() += 1;
    }
    let n = samples.len() as f64;
    let mut value = 0.0;
    for (&(x, y), &c) in &joint {
        let c = c as f64;
        value += c / n * (c * n / (px[x] as f64 * py[y] as f64)).ln();
    }
    let (sx, sy, sxy) = (px.len() as f64, py.len() as f64, joint.len() as f64);
    if opts.miller_madow {
        value += ((sx - 1.0) + (sy - 1.0) - (sxy - 1.0)) / (2.0 * n);
    }
    let degenerate = samples.len() < 2 || px.len() < 2 || py.len() < 2;
    MiEstimate {
        value: if degenerate { 0.0 } else { value.max(0.0) },
        samples: samples.len(),
        x_support: px.len(),
        y_support: py.len(),
        degenerate,
        bias: (sx - 1.0) * (sy - 1.0) / (2.0 * n),
    }
}

pub fn plugin_cmi<X: Ord + Clone, Y: Ord + Clone, Z: Ord + Clone>(samples: &[(X, Y, Z)]) -> CmiEstimate<Z> {
    plugin_cmi_with(samples, MiOptions::default())
}

/// `sum_z p(z) I(X;Y | Z=z)` with empirical stratum weights.
pub fn plugin_cmi_with<X: Ord + Clone, Y: Ord + Clone, Z: Ord + Clone>(
    samples: &[(X, Y, Z)],
    opts: MiOptions,
) -> CmiEstimate<Z> {
    let mut groups: BTreeMap<&Z, Vec<(X, Y)>> = BTreeMap::new();
    for (x, y, z) in samples {
        groups.entry(z).or_default().push((x.clone(), y.clone()));
    }
    let n = samples.len() as f64;
    let mut value = 0.0;
    let strata = groups
        .into_iter()
        .map(|(z, pairs)| {
            let weight = pairs.len() as f64 / n;
            let estimate = plugin_mi_with(&pairs, opts);
            value += weight * estimate.value;
            Stratum {
                z: z.clone(),
                weight,
                estimate,
            }
        })
        .collect();
    CmiEstimate {
        value,
        samples: samples.len(),
        strata,
    }
}
