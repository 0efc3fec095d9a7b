use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, LocalModels, VProtocol};
use crate::bounds::{
    bregman_aggregation_bound, comm_constraint_bound, convex_smooth_bound, dp_bound, fastrate_bound, gamma,
    heterogeneity_kl_bound, sqrt_ecmi_bound, BoundEntry, CmiEstimates, FastRateConstants, GapTarget,
};
use crate::construction::{
    build_superclient, build_supersamples, draw_selection, materialize_training_sets, SelectionAssignment,
    SuperClientGrid, SuperSampleTensor,
};
use crate::error::{Error, Result};
use crate::fl::run_protocol;
use crate::meta::{kl_population_vs_client, MetaDistribution, MetaSpec};
use crate::mi::MiOptions;
use crate::model::{eval_loss, quantize_model, Architecture, Hypothesis, LossSpec, QuantCode};
use crate::seed::SeedPath;
use crate::tables::{
    estimate_cmi, estimate_og, estimate_pg, evaluate_loss_tensor, training_losses, CmiSampleTable, LossBinning,
    LossTensor,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Size of the worker pool; `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub z_draw: usize,
    pub u_draw: usize,
    pub pg: f64,
    pub og: f64,
    pub total: f64,
    pub emp_risk: f64,
    pub max_local_emp_risk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub pg: f64,
    pub og: f64,
    pub total: f64,
    pub emp_risk: f64,
    /// Standard errors across the outer (supersample) draws.
    pub pg_stderr: f64,
    pub og_stderr: f64,
    pub total_stderr: f64,
    pub repetitions: usize,
    pub outer_draws: usize,
}

impl GapSummary {
    pub fn gap(&self, target: GapTarget) -> f64 {
        match target {
            GapTarget::Total => self.total,
            GapTarget::Participation => self.pg,
            GapTarget::OutOfSample => self.og,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
    pub os: String,
    pub arch: String,
}

impl Environment {
    fn current() -> Self {
        Environment {
            version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment_id: String,
    pub config: ExperimentConfig,
    pub seed_root: Vec<u64>,
    pub repetitions: Vec<RepetitionRecord>,
    pub summary: GapSummary,
    pub cmi: CmiEstimates,
    pub binning: LossBinning,
    pub loss: LossSpec,
    /// Mean training loss of the global model per slot `i*n + j`.
    pub slot_train_losses: Vec<f64>,
    /// Mean KL between the population marginal and each participating
    /// client, when the family admits a closed form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_kl: Option<Vec<f64>>,
    pub interpolating: bool,
    pub max_local_emp_risk: f64,
    pub clamped_fraction: f64,
    pub bounds: Vec<BoundEntry>,
    pub warnings: Vec<String>,
    pub environment: Environment,
}

impl ExperimentReport {
    pub fn bound(&self, name: &str) -> Option<&BoundEntry> {
        self.bounds.iter().find(|b| b.name == name)
    }
}

/// Hex prefix of the SHA-256 of the canonical config (without its output
/// directory).
pub fn experiment_id(cfg: &ExperimentConfig) -> String {
    let mut canonical = cfg.clone();
    canonical.output_dir = None;
    let bytes = serde_json::to_vec(&canonical).expect("config serializes");
    Sha256::digest(&bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn seed_root(cfg: &ExperimentConfig) -> SeedPath {
    SeedPath::root(cfg.seed).child(cfg.k as u64).child(cfg.n as u64)
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let meta = MetaDistribution::new(cfg.meta.clone())?;
    run_experiment_with(cfg, &meta, opts)
}

/// Like [`run_experiment`] with an already constructed meta-distribution
/// (lets sweeps load a fixed dataset once).
pub fn run_experiment_with(cfg: &ExperimentConfig, meta: &MetaDistribution, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    match opts.workers {
        Some(0) => Err(Error::param("workers must be >= 1")),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::param(format!("cannot build a pool of {w} workers: {e}")))?
            .install(|| simulate(cfg, meta)),
        None => simulate(cfg, meta),
    }
}

struct Repetition {
    record: RepetitionRecord,
    tensor: LossTensor,
    assignment: SelectionAssignment,
    codes: Option<Vec<QuantCode>>,
    slot_losses: Vec<f64>,
    kl: Option<Vec<f64>>,
}

struct OuterDraw {
    reps: Vec<Repetition>,
    clamped: usize,
    entries: usize,
}

struct Plan<'a> {
    cfg: &'a ExperimentConfig,
    meta: &'a MetaDistribution,
    arch: Architecture,
    loss: LossSpec,
    root: SeedPath,
    quant_radius: Option<f64>,
    with_kl: bool,
}

fn simulate(cfg: &ExperimentConfig, meta: &MetaDistribution) -> Result<ExperimentReport> {
    let arch = cfg.train.model.architecture(meta.input_dim(), meta.classes())?;
    let loss = cfg.loss.spec(meta.domain());
    loss.check_architecture(&arch)?;
    if cfg.quantization.is_some() && arch.is_classifier() {
        return Err(Error::capability("model quantization is only supported for mean-vector models"));
    }
    let plan = Plan {
        cfg,
        meta,
        arch,
        loss,
        root: seed_root(cfg),
        quant_radius: cfg.quantization.map(|q| q.radius.unwrap_or(meta.domain().radius)),
        with_kl: matches!(meta.spec(), MetaSpec::GaussianMeanEstimation { sigma, .. } if *sigma > 0.0),
    };
    let supersamples: Vec<(SuperClientGrid, SuperSampleTensor)> = (0..cfg.estimation.z_draws)
        .into_par_iter()
        .map(|d| {
            let dd = d as u64;
            build_superclient(meta, cfg.k, &plan.root.tag("grid").child(dd))
                .and_then(|g| build_supersamples(&g, cfg.n, &plan.root.tag("data").child(dd)).map(|z| (g, z)))
                .map_err(|e| repetition_error(d, 0, e))
        })
        .collect::<Result<_>>()?;
    let u_draws = cfg.estimation.u_draws;
    let reps: Vec<Repetition> = (0..supersamples.len() * u_draws)
        .into_par_iter()
        .map(|r| {
            let (d, u) = (r / u_draws, r % u_draws);
            let (grid, z) = &supersamples[d];
            repetition(&plan, d, u, grid, z).map_err(|e| repetition_error(d, u, e))
        })
        .collect::<Result<_>>()?;
    let mut reps = reps.into_iter();
    let draws = supersamples
        .iter()
        .map(|(_, z)| OuterDraw {
            reps: reps.by_ref().take(u_draws).collect(),
            clamped: z.clamped_count(),
            entries: z.entries().len(),
        })
        .collect();
    assemble(&plan, draws)
}

fn repetition_error(d: usize, u: usize, e: Error) -> Error {
    Error::Repetition {
        z_draw: d,
        u_draw: u,
        source: Box::new(e),
    }
}

fn repetition(plan: &Plan<'_>, d: usize, u: usize, grid: &SuperClientGrid, z: &SuperSampleTensor) -> Result<Repetition> {
    let cfg = plan.cfg;
    let (dd, uu) = (d as u64, u as u64);
    let v_seed = match cfg.estimation.v_protocol {
        VProtocol::WithZ => plan.root.tag("v").child(dd),
        VProtocol::WithU => plan.root.tag("v").child(dd).child(uu),
    };
    let a = draw_selection(cfg.k, cfg.n, &plan.root.tag("u").child(dd).child(uu))?
        .with_v_from(&draw_selection(cfg.k, cfg.n, &v_seed)?)?;
    let train = materialize_training_sets(z, &a)?;
    let out = run_protocol(&train, plan.arch, &cfg.train, &plan.loss, &plan.root.tag("train").child(dd).child(uu))?;
    let tensor = evaluate_loss_tensor(&out.global, z, &plan.loss)?;
    let pg = estimate_pg(&tensor, &a, cfg.estimation.average_over_j)?;
    let og = estimate_og(&tensor, &a)?;
    let slot_losses = training_losses(&tensor, &a)?;
    let emp_risk = mean(&slot_losses);
    let mut max_local = 0.0f64;
    for (w, data) in out.locals.iter().zip(&train) {
        let mut s = 0.0;
        for inst in data {
            s += eval_loss(w, inst, &plan.loss)?;
        }
        max_local = max_local.max(s / data.len() as f64);
    }
    let codes = match (plan.quant_radius, cfg.quantization) {
        (Some(radius), Some(q)) => {
            let locals: &[Hypothesis] = match cfg.estimation.local_models {
                LocalModels::FinalRound => &out.locals,
                LocalModels::FirstRound => &out.first_round_locals,
            };
            Some(
                locals
                    .iter()
                    .map(|w| quantize_model(w, q.bits, radius))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        _ => None,
    };
    let kl = if plan.with_kl {
        Some(
            (0..cfg.k)
                .map(|i| kl_population_vs_client(plan.meta, grid.cell(i, a.v(i))))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(Repetition {
        record: RepetitionRecord {
            z_draw: d,
            u_draw: u,
            pg,
            og,
            total: pg + og,
            emp_risk,
            max_local_emp_risk: max_local,
        },
        tensor,
        assignment: a,
        codes,
        slot_losses,
        kl,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn stderr(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

fn assemble(plan: &Plan<'_>, draws: Vec<OuterDraw>) -> Result<ExperimentReport> {
    let cfg = plan.cfg;
    let (k, n) = (cfg.k, cfg.n);
    let mut warnings = Vec::new();
    let mut table = CmiSampleTable::new(k, n);
    let mut records = Vec::new();
    let mut slot_sum = vec![0.0; k * n];
    let mut kl_sum = plan.with_kl.then(|| vec![0.0; k]);
    let (mut clamped, mut entries) = (0usize, 0usize);
    let mut per_draw: [Vec<f64>; 3] = Default::default();
    for draw in &draws {
        clamped += draw.clamped;
        entries += draw.entries;
        for rep in &draw.reps {
            table.push(&rep.tensor, &rep.assignment, rep.codes.as_deref())?;
            for (s, l) in slot_sum.iter_mut().zip(&rep.slot_losses) {
                *s += l;
            }
            if let (Some(acc), Some(kl)) = (kl_sum.as_mut(), rep.kl.as_ref()) {
                for (a, b) in acc.iter_mut().zip(kl) {
                    *a += b;
                }
            }
            records.push(rep.record.clone());
        }
        let field = |f: fn(&RepetitionRecord) -> f64| mean(&draw.reps.iter().map(|r| f(&r.record)).collect::<Vec<_>>());
        per_draw[0].push(field(|r| r.pg));
        per_draw[1].push(field(|r| r.og));
        per_draw[2].push(field(|r| r.total));
    }
    let reps = records.len() as f64;
    let col = |f: fn(&RepetitionRecord) -> f64| records.iter().map(f).sum::<f64>() / reps;
    let summary = GapSummary {
        pg: col(|r| r.pg),
        og: col(|r| r.og),
        total: col(|r| r.total),
        emp_risk: col(|r| r.emp_risk),
        pg_stderr: stderr(&per_draw[0]),
        og_stderr: stderr(&per_draw[1]),
        total_stderr: stderr(&per_draw[2]),
        repetitions: records.len(),
        outer_draws: draws.len(),
    };
    if draws.len() < 2 {
        warnings.push("a single supersample draw gives no standard error".to_string());
    }
    let max_local = records.iter().map(|r| r.max_local_emp_risk).fold(0.0, f64::max);
    let clamped_fraction = clamped as f64 / entries as f64;
    if clamped > 0 {
        warnings.push(format!(
            "{clamped} of {entries} instances were projected onto the domain ({:.3}%)",
            100.0 * clamped_fraction
        ));
    }
    let binning = cfg.estimation.binning();
    let cmi = estimate_cmi(
        &table,
        &binning,
        MiOptions {
            miller_madow: cfg.estimation.miller_madow,
        },
    )?;
    let mut report = ExperimentReport {
        experiment_id: experiment_id(cfg),
        config: cfg.clone(),
        seed_root: plan.root.components().to_vec(),
        repetitions: records,
        summary,
        cmi,
        binning,
        loss: plan.loss,
        slot_train_losses: slot_sum.into_iter().map(|s| s / reps).collect(),
        client_kl: kl_sum.map(|v| v.into_iter().map(|s| s / reps).collect()),
        interpolating: max_local == 0.0,
        max_local_emp_risk: max_local,
        clamped_fraction,
        bounds: Vec::new(),
        warnings,
        environment: Environment::current(),
    };
    let (bounds, notes) = evaluate_bounds(&report);
    report.bounds = bounds;
    report.warnings.extend(notes);
    Ok(report)
}

struct Evaluated {
    value: f64,
    inputs: BTreeMap<String, f64>,
    notes: Vec<String>,
    constants: Option<FastRateConstants>,
}

impl Evaluated {
    fn new(value: f64, inputs: &[(&str, f64)]) -> Self {
        Evaluated {
            value,
            inputs: inputs.iter().map(|(a, b)| (a.to_string(), *b)).collect(),
            notes: Vec::new(),
            constants: None,
        }
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }
}

/// Computes every enabled bound from the stored estimates. Bounds whose
/// prerequisites are missing are skipped with a warning.
pub fn evaluate_bounds(r: &ExperimentReport) -> (Vec<BoundEntry>, Vec<String>) {
    let cfg = &r.config;
    let bc = &cfg.bounds;
    let (k, n) = (cfg.k, cfg.n);
    let bits = cfg.quantization.map(|q| q.bits);
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let mut record = |name: &str, target: GapTarget, res: Result<Evaluated>| match res {
        Ok(ev) => out.push(BoundEntry {
            name: name.to_string(),
            value: ev.value,
            target,
            holds: Some(ev.value >= r.summary.gap(target)),
            constants: ev.constants,
            inputs: ev.inputs,
            n_mi_samples: r.summary.repetitions,
            notes: ev.notes,
        }),
        Err(e) => warnings.push(format!("{name} bound not evaluated: {e}")),
    };

    if bc.sqrt_ecmi {
        record(
            "sqrt-ecmi",
            GapTarget::Total,
            sqrt_ecmi_bound(&r.cmi).map(|v| {
                Evaluated::new(v, &[]).note("loss-difference evaluated CMI; no larger than the hypothesis-level bound")
            }),
        );
    }
    if bc.fastrate {
        record(
            "fastrate-ecmi",
            GapTarget::Total,
            fastrate_bound(&r.cmi, r.summary.emp_risk, &bc.grid).map(|f| Evaluated {
                constants: Some(f.constants),
                ..Evaluated::new(f.gap_bound, &[("risk_bound", f.risk_bound), ("emp_risk", r.summary.emp_risk)])
            }),
        );
    }
    if let Some(dp) = &bc.dp {
        let local = dp.local_for(k);
        record(
            "dp",
            GapTarget::Total,
            dp_bound(dp.eps_global, &local, k, n)
                .map(|v| Evaluated::new(v, &[("eps_global", dp.eps_global), ("eps_local_mean", mean(&local))])),
        );
    }
    if bc.bregman {
        record(
            "bregman-aggregation",
            GapTarget::Total,
            bregman_aggregation_bound(&r.cmi, bc.sigma_part, bc.sigma_oos).map(|v| {
                let ev = Evaluated::new(
                    v,
                    &[
                        ("sigma_part", bc.sigma_part),
                        ("sigma_oos", bc.sigma_oos),
                        ("bits", f64::from(bits.unwrap_or(0))),
                    ],
                );
                match saturated_local_entries(&r.cmi) {
                    0 => ev,
                    s => ev.note(format!("{s} local-model MI entries sit at the ln 2 cap")),
                }
            }),
        );
    }
    if bc.comm {
        record(
            "comm-constraint",
            GapTarget::Total,
            bits.ok_or_else(|| Error::capability("no bit budget configured"))
                .and_then(|b| comm_constraint_bound(b, bc.sigma_comm, k, n))
                .map(|v| Evaluated::new(v, &[("sigma", bc.sigma_comm), ("bits", f64::from(bits.unwrap_or(0)))])),
        );
    }
    if bc.convex_smooth {
        record(
            "convex-smooth",
            GapTarget::OutOfSample,
            match (r.loss.strong_convexity, r.loss.smoothness) {
                (Some(a), Some(l)) => gamma(a, l).and_then(|g| {
                    convex_smooth_bound(&r.cmi, &r.slot_train_losses, a, l, r.interpolating)
                        .map(|v| Evaluated::new(v, &[("alpha", a), ("smoothness", l), ("gamma", g)]))
                }),
                _ => Err(Error::capability("the evaluation loss has no curvature constants")),
            },
        );
    }
    if bc.heterogeneity_kl {
        record(
            "heterogeneity-kl",
            GapTarget::Participation,
            r.client_kl
                .as_ref()
                .ok_or_else(|| Error::capability("closed-form client KL is unavailable for this family"))
                .and_then(|kls| heterogeneity_kl_bound(kls, bc.sigma_kl, k))
                .map(|v| {
                    Evaluated::new(v, &[("sigma", bc.sigma_kl)])
                        .note("participation term only; the I(W;Z) term is not evaluated")
                }),
        );
    }
    (out, warnings)
}

fn saturated_local_entries(e: &CmiEstimates) -> usize {
    let cap = std::f64::consts::LN_2 - 1e-9;
    let part = e.local_part.as_ref().map_or(0, |t| t.iter().filter(|m| m.value >= cap).count());
    let oos = e.local_oos.as_ref().map_or(0, |t| t.iter().filter(|c| c.value >= cap).count());
    part + oos
}

/// Re-evaluates the bounds of a stored report with new proxy constants,
/// leaving every simulated quantity untouched.
pub fn recompute_bounds(
    report: &ExperimentReport,
    sigma_part: Option<f64>,
    sigma_oos: Option<f64>,
    sigma_kl: Option<f64>,
) -> Result<ExperimentReport> {
    let mut r = report.clone();
    let b = &mut r.config.bounds;
    if let Some(s) = sigma_part {
        b.sigma_part = s;
        b.sigma_comm = s;
    }
    if let Some(s) = sigma_oos {
        b.sigma_oos = s;
    }
    if let Some(s) = sigma_kl {
        b.sigma_kl = s;
    }
    r.config.validate()?;
    let old: Vec<String> = report.warnings.iter().filter(|w| w.contains("bound not evaluated")).cloned().collect();
    r.warnings.retain(|w| !old.contains(w));
    let (bounds, notes) = evaluate_bounds(&r);
    r.bounds = bounds;
    r.warnings.extend(notes);
    Ok(r)
}
