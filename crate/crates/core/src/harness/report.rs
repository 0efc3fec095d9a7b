use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::ExperimentReport;
use super::sweep::SweepReport;
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 17] = [
    "experiment_id",
    "axis",
    "axis_value",
    "seed",
    "emp_risk",
    "pg_est",
    "og_est",
    "gap_est",
    "gap_stderr",
    "bound_name",
    "bound_value",
    "c1",
    "c2",
    "c3",
    "c4",
    "n_mi_samples",
    "notes",
];

/// Contents of a `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReportFile {
    Single(Box<ExperimentReport>),
    Sweep(SweepReport),
}

impl ReportFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: not a report: {e}", path.display())))
    }

    pub fn reports(&self) -> Vec<&ExperimentReport> {
        match self {
            ReportFile::Single(r) => vec![r.as_ref()],
            ReportFile::Sweep(s) => s.reports.iter().collect(),
        }
    }
}

/// `%.9g`-style rendering: nine significant digits, trailing zeros dropped.
pub fn format_real(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-5..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{x:.*}", (8 - exp) as usize))
    }
}

fn rows_for(r: &ExperimentReport, axis: &str, axis_value: &str) -> Vec<Vec<String>> {
    let s = &r.summary;
    let head = vec![
        r.experiment_id.clone(),
        axis.to_string(),
        axis_value.to_string(),
        r.config.seed.to_string(),
        format_real(s.emp_risk),
        format_real(s.pg),
        format_real(s.og),
        format_real(s.total),
        format_real(s.total_stderr),
    ];
    if r.bounds.is_empty() {
        let mut row = head;
        row.extend(std::iter::repeat_n(String::new(), 8));
        return vec![row];
    }
    r.bounds
        .iter()
        .map(|b| {
            let mut row = head.clone();
            let c = |f: fn(&crate::bounds::FastRateConstants) -> f64| b.constants.as_ref().map(f).map(format_real).unwrap_or_default();
            let mut notes = vec![match b.holds {
                Some(true) => "holds".to_string(),
                Some(false) => "VIOLATED".to_string(),
                None => "unevaluated".to_string(),
            }];
            notes.extend(b.notes.iter().cloned());
            row.extend([
                b.name.clone(),
                format_real(b.value),
                c(|k| k.c1),
                c(|k| k.c2),
                c(|k| k.c3),
                c(|k| k.c4),
                b.n_mi_samples.to_string(),
                notes.join("; "),
            ]);
            row
        })
        .collect()
}

pub fn metrics_rows(file: &ReportFile) -> Vec<Vec<String>> {
    match file {
        ReportFile::Single(r) => rows_for(r, "none", ""),
        ReportFile::Sweep(s) => s
            .reports
            .iter()
            .zip(&s.values)
            .flat_map(|(r, v)| rows_for(r, s.axis.label(), &v.to_string()))
            .collect(),
    }
}

pub fn metrics_csv(file: &ReportFile) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(METRICS_HEADER).expect("in-memory csv");
    for row in metrics_rows(file) {
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 fields")
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Pretty JSON exactly as stored in `report.json`.
pub fn report_json(file: &ReportFile) -> String {
    let mut json = serde_json::to_string_pretty(file).expect("reports serialize");
    json.push('\n');
    json
}

/// Writes `report.json` and `metrics.csv` into `dir`, replacing old copies.
pub fn write_report(file: &ReportFile, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("report.json"), report_json(file).as_bytes())?;
    write(&dir.join("metrics.csv"), metrics_csv(file).as_bytes())
}

/// Wall-clock time is kept out of `report.json` so that file stays
/// byte-reproducible.
pub fn write_timing(dir: impl AsRef<Path>, seconds: f64, workers: Option<usize>) -> Result<()> {
    let dir = dir.as_ref();
    let body = serde_json::json!({ "wall_clock_seconds": seconds, "workers": workers });
    write(&dir.join("timing.json"), format!("{body:#}\n").as_bytes())
}

/// Human-readable table of a `metrics.csv`.
pub fn render_metrics(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })?;
    let headers = rd
        .headers()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{}: missing column {name}", path.display())))
    };
    let picks = ["axis", "axis_value", "bound_name", "gap_est", "gap_stderr", "bound_value", "emp_risk", "notes"];
    let idx = picks.iter().map(|p| col(p)).collect::<Result<Vec<_>>>()?;
    let mut table: Vec<Vec<String>> = vec![picks.iter().map(|s| s.to_string()).collect()];
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        table.push(
            idx.iter()
                .map(|&i| {
                    let f = rec.get(i).unwrap_or("");
                    // first note is the validity mark
                    if i == idx[7] { f.split(';').next().unwrap_or("").to_string() } else { f.to_string() }
                })
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..picks.len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (n, row) in table.iter().enumerate() {
        let line: Vec<String> = row.iter().zip(&widths).map(|(f, w)| format!("{f:<w$}")).collect();
        writeln!(out, "{}", line.join("  ").trim_end()).expect("string write");
        if n == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            writeln!(out, "{}", rule.join("  ")).expect("string write");
        }
    }
    Ok(out)
}
