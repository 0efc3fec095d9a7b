//! Loss tensors, the unbiased gap estimators, and the one-dimensional loss
//! variables whose mutual information enters the bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::CmiEstimates;
use crate::construction::{SelectionAssignment, SuperSampleTensor};
use crate::error::{Error, Result};
use crate::mi::{plugin_cmi_with, plugin_mi_with, MiOptions};
use crate::model::{eval_loss, Hypothesis, LossSpec, QuantCode};

/// `values[((i*2 + b)*n + j)*2 + c] = loss(W, Z^{i,b}_{j,c})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTensor {
    k: usize,
    n: usize,
    values: Vec<f64>,
}

impl LossTensor {
    pub fn new(k: usize, n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != 4 * k * n {
            return Err(Error::structural(format!(
                "loss tensor for K={k}, n={n} needs {} entries, got {}",
                4 * k * n,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("loss {bad} outside [0,1]")));
        }
        Ok(LossTensor { k, n, values })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, b: usize, j: usize, c: usize) -> f64 {
        self.values[((i * 2 + b) * self.n + j) * 2 + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn check(&self, a: &SelectionAssignment) -> Result<()> {
        if a.k() != self.k || a.n() != self.n {
            return Err(Error::structural(format!(
                "assignment shape K={}, n={} does not match tensor K={}, n={}",
                a.k(),
                a.n(),
                self.k,
                self.n
            )));
        }
        Ok(())
    }
}

pub fn evaluate_loss_tensor(w: &Hypothesis, z: &SuperSampleTensor, spec: &LossSpec) -> Result<LossTensor> {
    let values = z
        .entries()
        .par_iter()
        .with_min_len(64)
        .map(|inst| eval_loss(w, inst, spec))
        .collect::<Result<Vec<_>>>()?;
    LossTensor::new(z.k(), z.n(), values)
}

/// Participation-gap estimate. Uses row `j = 0` of each cell, or the mean
/// over all rows when `average_over_j` is set.
pub fn estimate_pg(t: &LossTensor, a: &SelectionAssignment, average_over_j: bool) -> Result<f64> {
    t.check(a)?;
    let rows = if average_over_j { t.n } else { 1 };
    let mut total = 0.0;
    for i in 0..t.k {
        let sign = if a.v(i) == 0 { 1.0 } else { -1.0 };
        let mut diff = 0.0;
        for j in 0..rows {
            let held1 = t.get(i, 1, j, 1 - a.u(i, 1, j));
            let held0 = t.get(i, 0, j, 1 - a.u(i, 0, j));
            diff += held1 - held0;
        }
        total += sign * diff / rows as f64;
    }
    Ok(total / t.k as f64)
}

/// Out-of-sample-gap estimate over the participating cells.
pub fn estimate_og(t: &LossTensor, a: &SelectionAssignment) -> Result<f64> {
    t.check(a)?;
    let mut total = 0.0;
    for i in 0..t.k {
        let b = a.v(i);
        for j in 0..t.n {
            let sign = if a.u(i, b, j) == 0 { 1.0 } else { -1.0 };
            total += sign * (t.get(i, b, j, 1) - t.get(i, b, j, 0));
        }
    }
    Ok(total / (t.k * t.n) as f64)
}

/// Per-slot training losses `t[i][v_i][j][u^{i,v_i}_j]`, indexed `i*n + j`.
pub fn training_losses(t: &LossTensor, a: &SelectionAssignment) -> Result<Vec<f64>> {
    t.check(a)?;
    let mut out = Vec::with_capacity(t.k * t.n);
    for i in 0..t.k {
        let b = a.v(i);
        for j in 0..t.n {
            out.push(t.get(i, b, j, a.u(i, b, j)));
        }
    }
    Ok(out)
}

/// Average empirical risk of the participating clients.
pub fn empirical_risk(t: &LossTensor, a: &SelectionAssignment) -> Result<f64> {
    let l = training_losses(t, a)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipationSample {
    /// Held-out loss on cell `(i, 0)`, row 0.
    pub l_plus: f64,
    /// Held-out loss on cell `(i, 1)`, row 0.
    pub l_minus: f64,
    pub v: u8,
}

impl ParticipationSample {
    pub fn delta(&self) -> f64 {
        self.l_minus - self.l_plus
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OosSample {
    /// Loss on column 0 of the participating cell.
    pub l_plus: f64,
    /// Loss on column 1 of the participating cell.
    pub l_minus: f64,
    pub u: u8,
    pub v: u8,
}

impl OosSample {
    pub fn delta(&self) -> f64 {
        self.l_minus - self.l_plus
    }
}

/// Samples of the loss variables, one entry per repetition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CmiSampleTable {
    k: usize,
    n: usize,
    participation: Vec<Vec<ParticipationSample>>,
    oos: Vec<Vec<OosSample>>,
    local_part: Vec<Vec<(QuantCode, u8)>>,
    local_oos: Vec<Vec<(QuantCode, u8, u8)>>,
    with_locals: Option<bool>,
}

impl CmiSampleTable {
    pub fn new(k: usize, n: usize) -> Self {
        CmiSampleTable {
            k,
            n,
            participation: vec![Vec::new(); k],
            oos: vec![Vec::new(); k * n],
            local_part: vec![Vec::new(); k],
            local_oos: vec![Vec::new(); k * n],
            with_locals: None,
        }
    }

    /// Adds one repetition. `locals` holds the quantized local model of each
    /// participating client, in client order; it must be given for every
    /// repetition or for none.
    pub fn push(&mut self, t: &LossTensor, a: &SelectionAssignment, locals: Option<&[QuantCode]>) -> Result<()> {
        t.check(a)?;
        if t.k != self.k || t.n != self.n {
            return Err(Error::structural("repetition shape differs from the table"));
        }
        if *self.with_locals.get_or_insert(locals.is_some()) != locals.is_some() {
            return Err(Error::structural("quantized locals given for some repetitions only"));
        }
        if let Some(l) = locals {
            if l.len() != self.k {
                return Err(Error::structural(format!("{} local codes for K = {}", l.len(), self.k)));
            }
        }
        for i in 0..self.k {
            let v = a.v(i) as u8;
            self.participation[i].push(ParticipationSample {
                l_plus: t.get(i, 0, 0, 1 - a.u(i, 0, 0)),
                l_minus: t.get(i, 1, 0, 1 - a.u(i, 1, 0)),
                v,
            });
            if let Some(l) = locals {
                self.local_part[i].push((l[i].clone(), v));
            }
            let b = v as usize;
            for j in 0..self.n {
                let u = a.u(i, b, j) as u8;
                self.oos[i * self.n + j].push(OosSample {
                    l_plus: t.get(i, b, j, 0),
                    l_minus: t.get(i, b, j, 1),
                    u,
                    v,
                });
                if let Some(l) = locals {
                    self.local_oos[i * self.n + j].push((l[i].clone(), u, v));
                }
            }
        }
        Ok(())
    }

    pub fn repetitions(&self) -> usize {
        self.participation.first().map_or(0, Vec::len)
    }

    pub fn participation(&self, i: usize) -> &[ParticipationSample] {
        &self.participation[i]
    }

    pub fn oos(&self, i: usize, j: usize) -> &[OosSample] {
        &self.oos[i * self.n + j]
    }

    pub fn has_locals(&self) -> bool {
        self.with_locals == Some(true)
    }
}

/// Discretization of continuous losses for plug-in estimation. Zero-one
/// losses land on the extreme bins and are unaffected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossBinning {
    pub level_bins: u32,
    pub diff_bins: u32,
}

impl Default for LossBinning {
    fn default() -> Self {
        LossBinning {
            level_bins: 64,
            diff_bins: 129,
        }
    }
}

impl LossBinning {
    pub fn validate(&self) -> Result<()> {
        if self.level_bins < 2 || self.diff_bins < 3 {
            return Err(Error::param(format!(
                "need >= 2 level bins and >= 3 difference bins, got {} and {}",
                self.level_bins, self.diff_bins
            )));
        }
        Ok(())
    }

    /// Uniform bins on `[0,1]`.
    pub fn level(&self, x: f64) -> u32 {
        ((x * self.level_bins as f64).floor() as u32).min(self.level_bins - 1)
    }

    /// Nearest of `diff_bins` evenly spaced points on `[-1,1]`.
    pub fn diff(&self, x: f64) -> u32 {
        let top = (self.diff_bins - 1) as f64;
        (((x + 1.0) / 2.0 * top).round().clamp(0.0, top)) as u32
    }
}

/// Plug-in estimates of every table present in `table`.
pub fn estimate_cmi(table: &CmiSampleTable, binning: &LossBinning, opts: MiOptions) -> Result<CmiEstimates> {
    binning.validate()?;
    if table.repetitions() == 0 {
        return Err(Error::param("no repetitions recorded"));
    }
    let mut e = CmiEstimates::empty(table.k, table.n);
    e.part_level = Some(
        table
            .participation
            .iter()
            .map(|s| {
                let pairs: Vec<_> = s.iter().map(|p| (binning.level(p.l_plus), p.v)).collect();
                plugin_mi_with(&pairs, opts)
            })
            .collect(),
    );
    e.part_diff = Some(
        table
            .participation
            .iter()
            .map(|s| {
                let pairs: Vec<_> = s.iter().map(|p| (binning.diff(p.delta()), p.v)).collect();
                plugin_mi_with(&pairs, opts)
            })
            .collect(),
    );
    e.oos_level = Some(
        table
            .oos
            .iter()
            .map(|s| {
                let t: Vec<_> = s.iter().map(|o| (binning.level(o.l_plus), o.u, o.v)).collect();
                plugin_cmi_with(&t, opts)
            })
            .collect(),
    );
    e.oos_diff = Some(
        table
            .oos
            .iter()
            .map(|s| {
                let t: Vec<_> = s.iter().map(|o| (binning.diff(o.delta()), o.u, o.v)).collect();
                plugin_cmi_with(&t, opts)
            })
            .collect(),
    );
    if table.has_locals() {
        e.local_part = Some(table.local_part.iter().map(|s| plugin_mi_with(s, opts)).collect());
        e.local_oos = Some(table.local_oos.iter().map(|s| plugin_cmi_with(s, opts)).collect());
    }
    let single_stratum = e
        .oos_level
        .as_ref()
        .map_or(0, |t| t.iter().filter(|c| c.strata.len() < 2).count());
    if single_stratum > 0 {
        e.warnings.push(format!(
            "{single_stratum} of {} out-of-sample tables observed only one value of v; the missing stratum has weight 0",
            table.k * table.n
        ));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tensor(k: usize, n: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> LossTensor {
        let mut v = Vec::new();
        for i in 0..k {
            for b in 0..2 {
                for j in 0..n {
                    for c in 0..2 {
                        v.push(f(i, b, j, c));
                    }
                }
            }
        }
        LossTensor::new(k, n, v).unwrap()
    }

    fn zeros(k: usize, n: usize) -> SelectionAssignment {
        SelectionAssignment::new(k, n, vec![0; k], vec![0; 2 * k * n]).unwrap()
    }

    #[test]
    fn pg_held_out_extreme() {
        // u = 0 everywhere so held-out is column 1; cell b=1 all ones, b=0 all zeros
        let t = tensor(3, 2, |_, b, _, _| b as f64);
        assert_eq!(estimate_pg(&t, &zeros(3, 2), false).unwrap(), 1.0);
        assert_eq!(estimate_pg(&t, &zeros(3, 2), true).unwrap(), 1.0);
    }

    #[test]
    fn constant_tensor_has_no_gap() {
        let t = tensor(2, 3, |_, _, _, _| 0.4);
        let a = SelectionAssignment::new(2, 3, vec![1, 0], vec![1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1]).unwrap();
        assert_eq!(estimate_pg(&t, &a, true).unwrap(), 0.0);
        assert_eq!(estimate_og(&t, &a).unwrap(), 0.0);
    }

    #[test]
    fn hand_filled_pg() {
        // K=2, n=1; values indexed by (i,b,c)
        let vals = [[[0.1, 0.2], [0.3, 0.4]], [[0.5, 0.6], [0.7, 0.8]]];
        let t = tensor(2, 1, |i, b, _, c| vals[i][b][c]);
        // v = (1, 0); u^{0,0}=1, u^{0,1}=0, u^{1,0}=0, u^{1,1}=1
        let a = SelectionAssignment::new(2, 1, vec![1, 0], vec![1, 0, 0, 1]).unwrap();
        // i=0: -(t[0][1][0][1] - t[0][0][0][0]) = -(0.4 - 0.1)
        // i=1: +(t[1][1][0][0] - t[1][0][0][1]) = (0.7 - 0.6)
        let expect = (-(0.4 - 0.1) + (0.7 - 0.6)) / 2.0;
        assert_abs_diff_eq!(estimate_pg(&t, &a, false).unwrap(), expect, epsilon = 1e-15);
    }

    #[test]
    fn og_examples() {
        let t = tensor(2, 2, |_, _, _, c| c as f64);
        assert_eq!(estimate_og(&t, &zeros(2, 2)).unwrap(), 1.0);
        assert_eq!(empirical_risk(&t, &zeros(2, 2)).unwrap(), 0.0);
        let same = tensor(2, 2, |i, b, j, _| (i + b + j) as f64 / 10.0);
        assert_eq!(estimate_og(&same, &zeros(2, 2)).unwrap(), 0.0);

        // K=1, n=2: u = (0, 1) on the participating cell b=0
        let vals = [[0.2, 0.9], [0.6, 0.1]];
        let t = tensor(1, 2, |_, b, j, c| if b == 0 { vals[j][c] } else { 0.0 });
        let a = SelectionAssignment::new(1, 2, vec![0], vec![0, 1, 0, 0]).unwrap();
        let expect = ((0.9 - 0.2) - (0.1 - 0.6)) / 2.0;
        assert_abs_diff_eq!(estimate_og(&t, &a).unwrap(), expect, epsilon = 1e-15);
    }

    #[test]
    fn sample_table_definitions() {
        let t = tensor(2, 2, |i, b, j, c| ((i * 8 + b * 4 + j * 2 + c) as f64) / 16.0);
        let a = SelectionAssignment::new(2, 2, vec![0, 1], vec![1, 0, 0, 1, 0, 1, 1, 0]).unwrap();
        let mut table = CmiSampleTable::new(2, 2);
        table.push(&t, &a, None).unwrap();
        assert_eq!(table.repetitions(), 1);
        for i in 0..2 {
            let p = table.participation(i)[0];
            assert_eq!(p.l_plus, t.get(i, 0, 0, 1 - a.u(i, 0, 0)));
            assert_eq!(p.l_minus, t.get(i, 1, 0, 1 - a.u(i, 1, 0)));
            assert_eq!(p.delta(), p.l_minus - p.l_plus);
            for j in 0..2 {
                let o = table.oos(i, j)[0];
                let b = a.v(i);
                assert_eq!(o.l_plus, t.get(i, b, j, 0));
                assert_eq!(o.delta(), t.get(i, b, j, 1) - t.get(i, b, j, 0));
                assert_eq!(o.u as usize, a.u(i, b, j));
            }
        }
    }

    #[test]
    fn zero_one_supports() {
        let t = tensor(1, 1, |_, b, _, c| ((b + c) % 2) as f64);
        let a = SelectionAssignment::new(1, 1, vec![0], vec![0, 1]).unwrap();
        let mut table = CmiSampleTable::new(1, 1);
        table.push(&t, &a, None).unwrap();
        let p = table.participation(0)[0];
        assert!([0.0, 1.0].contains(&p.l_plus));
        assert!([-1.0, 0.0, 1.0].contains(&p.delta()));
    }

    #[test]
    fn forty_five_samples_from_three_by_fifteen() {
        let mut table = CmiSampleTable::new(2, 1);
        for d in 0..3u64 {
            for u in 0..15u64 {
                let a = crate::construction::draw_selection(2, 1, &crate::seed::SeedPath::root(d).child(u)).unwrap();
                let t = tensor(2, 1, |i, b, _, c| ((i + b + c + d as usize) % 2) as f64);
                table.push(&t, &a, None).unwrap();
            }
        }
        assert_eq!(table.participation(0).len(), 45);
        let e = estimate_cmi(&table, &LossBinning::default(), MiOptions::default()).unwrap();
        assert_eq!(e.part_level.as_ref().unwrap()[0].samples, 45);
        let strata: usize = e.oos_level.as_ref().unwrap()[1].strata.iter().map(|s| s.estimate.samples).sum();
        assert_eq!(strata, 45);
    }

    #[test]
    fn binning() {
        let b = LossBinning::default();
        assert_eq!(b.level(0.0), 0);
        assert_eq!(b.level(1.0), 63);
        assert_eq!(b.level(0.5), 32);
        assert_eq!(b.diff(-1.0), 0);
        assert_eq!(b.diff(0.0), 64);
        assert_eq!(b.diff(1.0), 128);
    }

    #[test]
    fn mixed_locals_rejected() {
        let t = tensor(1, 1, |_, _, _, _| 0.0);
        let a = zeros(1, 1);
        let mut table = CmiSampleTable::new(1, 1);
        table.push(&t, &a, Some(&[QuantCode(vec![1])])).unwrap();
        assert!(table.push(&t, &a, None).is_err());
    }

    #[test]
    fn out_of_range_loss_rejected() {
        assert!(matches!(LossTensor::new(1, 1, vec![0.0, 0.5, 1.2, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(LossTensor::new(1, 1, vec![0.0; 3]), Err(Error::Structural(_))));
    }
}
