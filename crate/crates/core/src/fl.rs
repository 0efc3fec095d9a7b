//! Local training, model averaging and the multi-round FedAvg protocol.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::Instance;
use crate::model::{surrogate_gradient, Architecture, Hypothesis, LossSpec};
use crate::seed::SeedPath;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    FullGd,
    MinibatchSgd,
    ClosedFormErm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelKind {
    LinearSoftmax,
    Mlp { hidden: usize },
    MeanVector,
}

impl ModelKind {
    pub fn architecture(&self, input_dim: usize, classes: Option<usize>) -> Result<Architecture> {
        let need_classes = || {
            classes.ok_or_else(|| Error::param("classifier models need a labeled meta-distribution"))
        };
        Ok(match *self {
            ModelKind::LinearSoftmax => Architecture::LinearSoftmax {
                input_dim,
                classes: need_classes()?,
            },
            ModelKind::Mlp { hidden } => {
                if hidden == 0 || hidden > 64 {
                    return Err(Error::param(format!("hidden width must be in 1..=64, got {hidden}")));
                }
                Architecture::Mlp {
                    input_dim,
                    hidden,
                    classes: need_classes()?,
                }
            }
            ModelKind::MeanVector => {
                if classes.is_some() {
                    return Err(Error::param("mean-vector models need an unlabeled meta-distribution"));
                }
                Architecture::MeanVector { dim: input_dim }
            }
        })
    }
}

/// Step-wise decay: the rate used at step `t` is
/// `initial * decay^(t / period)` (integer division).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.1,
            decay: 0.01,
            period: 10,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, step: usize) -> f64 {
        self.initial * self.decay.powi((step / self.period) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    pub optimizer: Optimizer,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    /// Radius of the parameter ball classifier iterates are projected onto.
    /// Mean-vector iterates always stay inside the data domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_radius: Option<f64>,
    pub model: ModelKind,
}

fn default_rounds() -> usize {
    20
}

fn default_epochs() -> usize {
    5
}

fn default_batch() -> usize {
    50
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::param(format!(
                "rounds and local_epochs must be >= 1, got {} and {}",
                self.rounds, self.local_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        let lr = &self.lr;
        if !(lr.initial > 0.0 && lr.initial.is_finite()) || !(lr.decay > 0.0 && lr.decay <= 1.0) || lr.period == 0 {
            return Err(Error::param(format!(
                "learning-rate schedule needs initial > 0, decay in (0,1], period >= 1; got {lr:?}"
            )));
        }
        if let Some(r) = self.projection_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::param(format!("projection_radius must be > 0, got {r}")));
            }
        }
        Ok(())
    }
}

fn project(w: &mut Hypothesis, cfg: &TrainConfig, spec: &LossSpec) {
    match w.arch {
        Architecture::MeanVector { .. } => {
            spec.domain.project(&mut w.params);
        }
        _ => {
            if let Some(r) = cfg.projection_radius {
                let nrm = w.params.iter().map(|p| p * p).sum::<f64>().sqrt();
                if nrm > r {
                    let s = r / nrm;
                    w.params.iter_mut().for_each(|p| *p *= s);
                }
            }
        }
    }
}

fn sample_mean(data: &[Instance]) -> Vec<f64> {
    let dim = data[0].x.len();
    let mut mean = vec![0.0; dim];
    for z in data {
        for (m, x) in mean.iter_mut().zip(&z.x) {
            *m += x;
        }
    }
    let inv = 1.0 / data.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// Runs `local_epochs` of the configured optimizer from `w0`.
pub fn local_train(
    w0: &Hypothesis,
    data: &[Instance],
    cfg: &TrainConfig,
    spec: &LossSpec,
    seed: &SeedPath,
) -> Result<Hypothesis> {
    Ok(local_train_from(w0, data, cfg, spec, seed, 0)?.0)
}

/// Same as [`local_train`] with the schedule starting at `first_step`;
/// also returns the number of optimizer steps taken.
fn local_train_from(
    w0: &Hypothesis,
    data: &[Instance],
    cfg: &TrainConfig,
    spec: &LossSpec,
    seed: &SeedPath,
    first_step: usize,
) -> Result<(Hypothesis, usize)> {
    if data.is_empty() {
        return Err(Error::param("local training set is empty"));
    }
    cfg.validate()?;
    let mut w = w0.clone();
    let mut step = first_step;
    match cfg.optimizer {
        Optimizer::ClosedFormErm => {
            if w.arch.is_classifier() {
                return Err(Error::capability("closed-form ERM exists only for mean-vector models"));
            }
            w.params = sample_mean(data);
            project(&mut w, cfg, spec);
        }
        Optimizer::FullGd => {
            for _ in 0..cfg.local_epochs {
                apply_step(&mut w, data, cfg.lr.rate(step), cfg, spec)?;
                step += 1;
            }
        }
        Optimizer::MinibatchSgd => {
            let mut rng = seed.rng();
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.local_epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    batch.clear();
                    batch.extend(chunk.iter().map(|&i| data[i].clone()));
                    apply_step(&mut w, &batch, cfg.lr.rate(step), cfg, spec)?;
                    step += 1;
                }
            }
        }
    }
    Ok((w, step - first_step))
}

fn apply_step(w: &mut Hypothesis, batch: &[Instance], rate: f64, cfg: &TrainConfig, spec: &LossSpec) -> Result<()> {
    let g = surrogate_gradient(w, batch, spec)?;
    for (p, gi) in w.params.iter_mut().zip(&g) {
        *p -= rate * gi;
    }
    project(w, cfg, spec);
    Ok(())
}

/// Coordinate-wise mean. Each coordinate is summed pairwise over its values
/// in sorted order, so the result does not depend on the order of `models`.
pub fn aggregate_average(models: &[Hypothesis]) -> Result<Hypothesis> {
    let first = models.first().ok_or_else(|| Error::param("nothing to aggregate"))?;
    if let Some(bad) = models.iter().find(|m| m.arch != first.arch) {
        return Err(Error::structural(format!(
            "cannot average {:?} with {:?}",
            first.arch, bad.arch
        )));
    }
    let inv = 1.0 / models.len() as f64;
    let mut column = Vec::with_capacity(models.len());
    let params = (0..first.params.len())
        .map(|p| {
            column.clear();
            column.extend(models.iter().map(|m| m.params[p]));
            column.sort_by(f64::total_cmp);
            pairwise_sum(&column) * inv
        })
        .collect();
    Ok(Hypothesis {
        arch: first.arch,
        params,
    })
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        len => {
            let (a, b) = v.split_at(len / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolOutput {
    pub global: Hypothesis,
    /// Local models of the final round.
    pub locals: Vec<Hypothesis>,
    /// Local models of the first round (equal to `locals` when R = 1).
    pub first_round_locals: Vec<Hypothesis>,
}

/// FedAvg: every round broadcasts the global model, trains each client
/// locally (in parallel on the current rayon pool) and averages.
pub fn run_protocol(
    train_sets: &[Vec<Instance>],
    arch: Architecture,
    cfg: &TrainConfig,
    spec: &LossSpec,
    seed: &SeedPath,
) -> Result<ProtocolOutput> {
    if train_sets.is_empty() {
        return Err(Error::param("protocol needs at least one client"));
    }
    cfg.validate()?;
    spec.check_architecture(&arch)?;
    let mut global = Hypothesis::init(arch, &seed.tag("init"));
    let mut steps = vec![0usize; train_sets.len()];
    let mut first_round_locals = Vec::new();
    let mut locals = Vec::new();
    for round in 0..cfg.rounds {
        let round_seed = seed.tag("round").child(round as u64);
        let results: Vec<(Hypothesis, usize)> = train_sets
            .par_iter()
            .zip(steps.par_iter())
            .enumerate()
            .map(|(i, (data, &first))| {
                local_train_from(&global, data, cfg, spec, &round_seed.child(i as u64), first)
            })
            .collect::<Result<_>>()?;
        locals = Vec::with_capacity(results.len());
        for (i, (w, taken)) in results.into_iter().enumerate() {
            steps[i] += taken;
            locals.push(w);
        }
        global = aggregate_average(&locals)?;
        if round == 0 {
            first_round_locals = locals.clone();
        }
    }
    Ok(ProtocolOutput {
        global,
        locals,
        first_round_locals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::Domain;
    use crate::model::{eval_loss, EvalLoss};

    fn quad_spec(r: f64) -> LossSpec {
        LossSpec::quadratic(Domain::new(r).unwrap(), EvalLoss::ScaledSquared)
    }

    fn cfg(optimizer: Optimizer, model: ModelKind) -> TrainConfig {
        TrainConfig {
            rounds: 1,
            local_epochs: 1,
            optimizer,
            batch_size: 50,
            lr: LrSchedule::default(),
            projection_radius: None,
            model,
        }
    }

    fn points(xs: &[&[f64]]) -> Vec<Instance> {
        xs.iter().map(|x| Instance::unlabeled(x.to_vec())).collect()
    }

    #[test]
    fn closed_form_is_sample_mean() {
        let data = points(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 2.0]]);
        let w0 = Hypothesis::mean_vector(vec![0.0, 0.0]);
        let c = cfg(Optimizer::ClosedFormErm, ModelKind::MeanVector);
        let w = local_train(&w0, &data, &c, &quad_spec(5.0), &SeedPath::root(0)).unwrap();
        assert_eq!(w.params, vec![0.0, 1.0]);
    }

    #[test]
    fn closed_form_interpolates_single_point() {
        let spec = quad_spec(2.0);
        let z = Instance::unlabeled(vec![0.3, -1.1]);
        let c = cfg(Optimizer::ClosedFormErm, ModelKind::MeanVector);
        let w = local_train(&Hypothesis::mean_vector(vec![0.0; 2]), std::slice::from_ref(&z), &c, &spec, &SeedPath::root(0))
            .unwrap();
        assert_eq!(w.params, z.x);
        assert_eq!(eval_loss(&w, &z, &spec).unwrap(), 0.0);
    }

    #[test]
    fn one_gradient_step_from_zero() {
        let spec = quad_spec(2.0);
        let z = Instance::unlabeled(vec![1.0, -0.5]);
        let c = cfg(Optimizer::FullGd, ModelKind::MeanVector);
        let w = local_train(&Hypothesis::mean_vector(vec![0.0; 2]), std::slice::from_ref(&z), &c, &spec, &SeedPath::root(0))
            .unwrap();
        let eta = 0.1;
        for (p, x) in w.params.iter().zip(&z.x) {
            assert!((p - eta * spec.grad_scale() * x).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_steps() {
        let s = LrSchedule::default();
        assert_eq!(s.rate(0), 0.1);
        assert_eq!(s.rate(9), 0.1);
        assert!((s.rate(10) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn averaging() {
        let a = Hypothesis::mean_vector(vec![1.0, 2.0]);
        let b = Hypothesis::mean_vector(vec![3.0, -2.0]);
        assert_eq!(aggregate_average(&[a.clone(), b.clone()]).unwrap().params, vec![2.0, 0.0]);
        assert_eq!(aggregate_average(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        let lin = Hypothesis::new(Architecture::LinearSoftmax { input_dim: 1, classes: 1 }, vec![0.0, 0.0]).unwrap();
        assert!(matches!(aggregate_average(&[a, lin]), Err(Error::Structural(_))));
    }

    #[test]
    fn averaging_is_order_free_bitwise() {
        use rand::Rng;
        let mut rng = SeedPath::root(3).rng();
        let mut models: Vec<Hypothesis> = (0..37)
            .map(|_| Hypothesis::mean_vector((0..4).map(|_| rng.random_range(-1e3..1e3)).collect()))
            .collect();
        let reference = aggregate_average(&models).unwrap();
        for _ in 0..20 {
            models.shuffle(&mut rng);
            assert_eq!(aggregate_average(&models).unwrap(), reference);
        }
    }

    #[test]
    fn one_round_closed_form_gives_grand_mean() {
        let sets = vec![points(&[&[1.0], &[3.0]]), points(&[&[-1.0], &[-2.0]])];
        let c = cfg(Optimizer::ClosedFormErm, ModelKind::MeanVector);
        let out = run_protocol(&sets, Architecture::MeanVector { dim: 1 }, &c, &quad_spec(5.0), &SeedPath::root(1))
            .unwrap();
        assert_eq!(out.global.params, vec![0.25]);
        assert_eq!(out.locals.len(), 2);
        assert_eq!(out.first_round_locals, out.locals);
    }

    #[test]
    fn single_client_protocol_is_local_training() {
        let sets = vec![points(&[&[1.0, 0.5], &[0.2, -0.4], &[0.0, 1.0]])];
        let mut c = cfg(Optimizer::MinibatchSgd, ModelKind::MeanVector);
        c.batch_size = 2;
        c.lr.decay = 1.0;
        let spec = quad_spec(3.0);
        let seed = SeedPath::root(9);
        let out = run_protocol(&sets, Architecture::MeanVector { dim: 2 }, &c, &spec, &seed).unwrap();
        let w0 = Hypothesis::init(Architecture::MeanVector { dim: 2 }, &seed.tag("init"));
        let direct = local_train(&w0, &sets[0], &c, &spec, &seed.tag("round").child(0).child(0)).unwrap();
        assert_eq!(out.global, direct);
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let spec = LossSpec::classification(Domain::new(10.0).unwrap());
        let sets: Vec<Vec<Instance>> = (0..6)
            .map(|i| {
                (0..20)
                    .map(|j| Instance::labeled(vec![(i + j) as f64 * 0.1 - 1.0, (j % 3) as f64], (j % 3) as u32))
                    .collect()
            })
            .collect();
        let mut c = cfg(Optimizer::MinibatchSgd, ModelKind::Mlp { hidden: 4 });
        c.rounds = 3;
        c.batch_size = 7;
        let arch = Architecture::Mlp { input_dim: 2, hidden: 4, classes: 3 };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_protocol(&sets, arch, &c, &spec, &SeedPath::root(5)).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(Optimizer::FullGd, ModelKind::MeanVector);
        c.rounds = 0;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        let mut c = cfg(Optimizer::FullGd, ModelKind::MeanVector);
        c.lr.decay = 1.5;
        assert!(c.validate().is_err());
        let lin = cfg(Optimizer::ClosedFormErm, ModelKind::LinearSoftmax);
        let w0 = Hypothesis::new(Architecture::LinearSoftmax { input_dim: 1, classes: 2 }, vec![0.0; 4]).unwrap();
        let data = vec![Instance::labeled(vec![0.0], 0)];
        let spec = LossSpec::classification(Domain::new(1.0).unwrap());
        assert!(matches!(
            local_train(&w0, &data, &lin, &spec, &SeedPath::root(0)),
            Err(Error::Capability(_))
        ));
        assert!(local_train(&w0, &[], &lin, &spec, &SeedPath::root(0)).is_err());
    }

    #[test]
    fn mean_iterates_stay_in_domain() {
        let spec = quad_spec(1.0);
        let mut c = cfg(Optimizer::FullGd, ModelKind::MeanVector);
        c.lr.initial = 50.0;
        c.local_epochs = 3;
        let data = points(&[&[1.0, 0.0]]);
        let w = local_train(&Hypothesis::mean_vector(vec![-1.0, 0.0]), &data, &c, &spec, &SeedPath::root(0)).unwrap();
        assert!(spec.domain.contains(&w.params));
    }
}
