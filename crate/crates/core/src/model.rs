//! Hypotheses, training surrogates and evaluation losses.
//!
//! Models are deliberately small and carry hand-written gradients:
//! a linear softmax classifier, a one-hidden-layer tanh network, and a
//! plain mean vector for the quadratic (Bregman) families.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{Domain, Instance};
use crate::seed::SeedPath;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    LinearSoftmax { input_dim: usize, classes: usize },
    Mlp { input_dim: usize, hidden: usize, classes: usize },
    MeanVector { dim: usize },
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        match *self {
            Architecture::LinearSoftmax { input_dim, classes } => classes * (input_dim + 1),
            Architecture::Mlp {
                input_dim,
                hidden,
                classes,
            } => hidden * (input_dim + 1) + classes * (hidden + 1),
            Architecture::MeanVector { dim } => dim,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, Architecture::MeanVector { .. })
    }

    fn input_dim(&self) -> usize {
        match *self {
            Architecture::LinearSoftmax { input_dim, .. } | Architecture::Mlp { input_dim, .. } => input_dim,
            Architecture::MeanVector { dim } => dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub arch: Architecture,
    pub params: Vec<f64>,
}

impl Hypothesis {
    pub fn new(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::structural(format!(
                "{arch:?} needs {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(Hypothesis { arch, params })
    }

    /// Zero weights, except the hidden layer of an MLP which needs a random
    /// start to break symmetry.
    pub fn init(arch: Architecture, seed: &SeedPath) -> Self {
        let mut params = vec![0.0; arch.param_count()];
        if let Architecture::Mlp { input_dim, hidden, .. } = arch {
            use rand::Rng;
            let mut rng = seed.rng();
            let bound = 1.0 / (input_dim as f64).sqrt();
            for p in &mut params[..hidden * input_dim] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Hypothesis { arch, params }
    }

    pub fn mean_vector(x: Vec<f64>) -> Self {
        Hypothesis {
            arch: Architecture::MeanVector { dim: x.len() },
            params: x,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self.arch {
            Architecture::LinearSoftmax { input_dim, classes } => {
                let (w, b) = self.params.split_at(classes * input_dim);
                (0..classes)
                    .map(|k| dot(&w[k * input_dim..(k + 1) * input_dim], x) + b[k])
                    .collect()
            }
            Architecture::Mlp {
                input_dim,
                hidden,
                classes,
            } => {
                let h = self.hidden_activations(x, input_dim, hidden);
                let off = hidden * (input_dim + 1);
                let (w2, b2) = self.params[off..].split_at(classes * hidden);
                (0..classes)
                    .map(|k| dot(&w2[k * hidden..(k + 1) * hidden], &h) + b2[k])
                    .collect()
            }
            Architecture::MeanVector { .. } => Vec::new(),
        }
    }

    fn hidden_activations(&self, x: &[f64], input_dim: usize, hidden: usize) -> Vec<f64> {
        let (w1, rest) = self.params.split_at(hidden * input_dim);
        let b1 = &rest[..hidden];
        (0..hidden)
            .map(|h| (dot(&w1[h * input_dim..(h + 1) * input_dim], x) + b1[h]).tanh())
            .collect()
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Surrogate {
    CrossEntropy,
    ScaledSquared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalLoss {
    ZeroOne,
    ScaledSquared,
    BregmanSquared,
}

/// Training surrogate plus evaluation loss. Quadratic losses are divided by
/// `(2r)^2`, which maps every pair of points in the radius-`r` ball into
/// `[0,1]`; `smoothness`/`strong_convexity` are reported after that scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub surrogate: Surrogate,
    pub evaluation: EvalLoss,
    pub domain: Domain,
    pub smoothness: Option<f64>,
    pub strong_convexity: Option<f64>,
}

impl LossSpec {
    pub fn classification(domain: Domain) -> Self {
        LossSpec {
            surrogate: Surrogate::CrossEntropy,
            evaluation: EvalLoss::ZeroOne,
            domain,
            smoothness: None,
            strong_convexity: None,
        }
    }

    pub fn quadratic(domain: Domain, evaluation: EvalLoss) -> Self {
        let curvature = 2.0 / (2.0 * domain.radius).powi(2);
        LossSpec {
            surrogate: Surrogate::ScaledSquared,
            evaluation,
            domain,
            smoothness: Some(curvature),
            strong_convexity: Some(curvature),
        }
    }

    /// `1 / (2r)^2`.
    pub fn scale(&self) -> f64 {
        1.0 / (2.0 * self.domain.radius).powi(2)
    }

    /// Gradient of the scaled squared loss is `(w - z) * grad_scale`.
    pub fn grad_scale(&self) -> f64 {
        2.0 * self.scale()
    }

    pub fn is_quadratic(&self) -> bool {
        self.evaluation != EvalLoss::ZeroOne
    }

    pub fn check_architecture(&self, arch: &Architecture) -> Result<()> {
        let quadratic_surrogate = self.surrogate == Surrogate::ScaledSquared;
        if quadratic_surrogate != self.is_quadratic() {
            return Err(Error::param(format!(
                "surrogate {:?} does not pair with evaluation {:?}",
                self.surrogate, self.evaluation
            )));
        }
        if arch.is_classifier() == self.is_quadratic() {
            return Err(Error::param(format!(
                "{arch:?} is incompatible with the {:?} evaluation loss",
                self.evaluation
            )));
        }
        if let (Some(l), Some(a)) = (self.smoothness, self.strong_convexity) {
            if !(a > 0.0 && a <= l) {
                return Err(Error::param(format!("need 0 < alpha <= L, got alpha={a}, L={l}")));
            }
        }
        Ok(())
    }
}

fn check_instance(z: &Instance, spec: &LossSpec, dim: usize) -> Result<()> {
    if z.x.len() != dim {
        return Err(Error::structural(format!(
            "instance has dimension {} but the model expects {dim}",
            z.x.len()
        )));
    }
    if !spec.domain.contains(&z.x) {
        return Err(Error::domain(format!(
            "instance norm exceeds domain radius {}",
            spec.domain.radius
        )));
    }
    Ok(())
}

pub fn eval_loss(w: &Hypothesis, z: &Instance, spec: &LossSpec) -> Result<f64> {
    check_instance(z, spec, w.arch.input_dim())?;
    match spec.evaluation {
        EvalLoss::ZeroOne => {
            if !w.arch.is_classifier() {
                return Err(Error::param("zero-one loss needs a classifier"));
            }
            let y = z
                .label
                .ok_or_else(|| Error::structural("zero-one loss needs a labeled instance"))?;
            Ok(if w.predict(&z.x) == y as usize { 0.0 } else { 1.0 })
        }
        EvalLoss::ScaledSquared | EvalLoss::BregmanSquared => {
            if w.arch.is_classifier() {
                return Err(Error::param("quadratic losses need a mean-vector hypothesis"));
            }
            let raw = if spec.evaluation == EvalLoss::ScaledSquared {
                w.params.iter().zip(&z.x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            } else {
                bregman_sq_norm(&w.params, &z.x)
            };
            let v = raw * spec.scale();
            if !(0.0..=1.0 + 1e-12).contains(&v) {
                return Err(Error::domain(format!(
                    "normalized quadratic loss {v} left [0,1]; hypothesis outside the domain"
                )));
            }
            Ok(v.clamp(0.0, 1.0))
        }
    }
}

/// `D_f(x, y)` for `f = ||.||^2`, written out from the Bregman definition.
pub fn bregman_sq_norm(x: &[f64], y: &[f64]) -> f64 {
    let f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let inner: f64 = y.iter().zip(x).map(|(yi, xi)| 2.0 * yi * (xi - yi)).sum();
    f(x) - f(y) - inner
}

/// Mean surrogate loss over a batch.
pub fn surrogate_loss(w: &Hypothesis, batch: &[Instance], spec: &LossSpec) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let mut total = 0.0;
    for z in batch {
        total += match spec.surrogate {
            Surrogate::CrossEntropy => {
                let y = z
                    .label
                    .ok_or_else(|| Error::structural("cross-entropy needs labels"))? as usize;
                let logits = w.logits(&z.x);
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                lse - logits[y]
            }
            Surrogate::ScaledSquared => {
                spec.scale()
                    * w.params.iter().zip(&z.x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
        };
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`surrogate_loss`] with respect to the flat parameters.
pub fn surrogate_gradient(w: &Hypothesis, batch: &[Instance], spec: &LossSpec) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let mut grad = vec![0.0; w.params.len()];
    for z in batch {
        match (spec.surrogate, w.arch) {
            (Surrogate::ScaledSquared, Architecture::MeanVector { .. }) => {
                let s = spec.grad_scale();
                for (g, (a, b)) in grad.iter_mut().zip(w.params.iter().zip(&z.x)) {
                    *g += (a - b) * s;
                }
            }
            (Surrogate::CrossEntropy, Architecture::LinearSoftmax { input_dim, classes }) => {
                let y = label_of(z)?;
                let mut p = softmax(&w.logits(&z.x));
                p[y] -= 1.0;
                let (gw, gb) = grad.split_at_mut(classes * input_dim);
                for k in 0..classes {
                    for (g, x) in gw[k * input_dim..(k + 1) * input_dim].iter_mut().zip(&z.x) {
                        *g += p[k] * x;
                    }
                    gb[k] += p[k];
                }
            }
            (
                Surrogate::CrossEntropy,
                Architecture::Mlp {
                    input_dim,
                    hidden,
                    classes,
                },
            ) => {
                let y = label_of(z)?;
                let h = w.hidden_activations(&z.x, input_dim, hidden);
                let off = hidden * (input_dim + 1);
                let w2 = &w.params[off..off + classes * hidden];
                let mut p = softmax(&w.logits(&z.x));
                p[y] -= 1.0;
                let (g1, g2) = grad.split_at_mut(off);
                let (gw2, gb2) = g2.split_at_mut(classes * hidden);
                let mut dh = vec![0.0; hidden];
                for k in 0..classes {
                    for u in 0..hidden {
                        gw2[k * hidden + u] += p[k] * h[u];
                        dh[u] += p[k] * w2[k * hidden + u];
                    }
                    gb2[k] += p[k];
                }
                let (gw1, gb1) = g1.split_at_mut(hidden * input_dim);
                for u in 0..hidden {
                    let da = dh[u] * (1.0 - h[u] * h[u]);
                    for (g, x) in gw1[u * input_dim..(u + 1) * input_dim].iter_mut().zip(&z.x) {
                        *g += da * x;
                    }
                    gb1[u] += da;
                }
            }
            (s, a) => {
                return Err(Error::param(format!("surrogate {s:?} does not apply to {a:?}")));
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(grad)
}

fn label_of(z: &Instance) -> Result<usize> {
    z.label
        .map(|y| y as usize)
        .ok_or_else(|| Error::structural("cross-entropy needs labels"))
}

/// Per-coordinate cell indices of a uniformly quantized model.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuantCode(pub Vec<u32>);

fn bits_per_coordinate(bits: u32, dim: usize) -> Result<u32> {
    if dim == 0 || (bits as usize) < dim {
        return Err(Error::param(format!(
            "need at least one bit per coordinate: B={bits}, d={dim}"
        )));
    }
    let per = bits / dim as u32;
    if per > 30 {
        return Err(Error::param(format!("{per} bits per coordinate is beyond the supported 30")));
    }
    Ok(per)
}

/// Uniform grid with `2^floor(B/d)` levels per coordinate over `[-r, r]^d`.
pub fn quantize_model(w: &Hypothesis, bits: u32, radius: f64) -> Result<QuantCode> {
    let per = bits_per_coordinate(bits, w.params.len())?;
    let levels = 1u64 << per;
    let width = 2.0 * radius / levels as f64;
    let tol = radius * 1e-9;
    w.params
        .iter()
        .map(|&x| {
            if !(x.abs() <= radius + tol) {
                return Err(Error::domain(format!("coordinate {x} outside [-{radius}, {radius}]")));
            }
            let cell = ((x + radius) / width).floor();
            Ok(cell.clamp(0.0, (levels - 1) as f64) as u32)
        })
        .collect::<Result<Vec<_>>>()
        .map(QuantCode)
}

/// Centre of each quantization cell.
pub fn dequantize(code: &QuantCode, bits: u32, radius: f64) -> Result<Vec<f64>> {
    let per = bits_per_coordinate(bits, code.0.len())?;
    let width = 2.0 * radius / (1u64 << per) as f64;
    Ok(code
        .0
        .iter()
        .map(|&c| -radius + (f64::from(c) + 0.5) * width)
        .collect())
}
