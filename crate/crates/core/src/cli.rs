//! `fedcmi` command line: `run`, `sweep`, `bounds` and `report`.
//!
//! Exit status is 0 on success, 1 for usage and validation errors and 2 for
//! runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::harness::{
    recompute_bounds, render_metrics, run_experiment, run_sweep, write_report, write_timing, Axis, ExperimentConfig,
    ReportFile, RunOptions, SweepReport,
};

pub const OUTPUT_DIR_ENV: &str = "FEDCMI_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "fedcmi-out";

#[derive(Parser, Debug)]
#[command(name = "fedcmi", version, about = "Federated generalization experiments and CMI bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write report.json and metrics.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: RunFlags,
    },
    /// Run one experiment per value of K or n.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[command(flatten)]
        common: RunFlags,
    },
    /// Recompute bounds from a stored report.json without retraining.
    Bounds {
        #[arg(long)]
        from: PathBuf,
        /// Sets both sub-Gaussian proxies (and the communication proxy).
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        sigma_part: Option<f64>,
        #[arg(long)]
        sigma_oos: Option<f64>,
        #[arg(long)]
        sigma_kl: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a summary table of a metrics.csv.
    Report {
        #[arg(long)]
        from: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct RunFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    #[value(name = "K", alias = "k")]
    K,
    #[value(name = "n", alias = "N")]
    N,
}

/// Parses `args` (program name first), dispatches, and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn output_dir(flag: Option<PathBuf>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    flag.or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, common } => {
            let cfg = load_config(&config, common.seed)?;
            let opts = RunOptions { workers: common.workers };
            let started = Instant::now();
            let report = run_experiment(&cfg, &opts)?;
            let dir = output_dir(common.out, Some(&cfg));
            write_report(&ReportFile::Single(Box::new(report.clone())), &dir)?;
            write_timing(&dir, started.elapsed().as_secs_f64(), common.workers)?;
            println!(
                "{}: PG {:+.4}  OG {:+.4}  total {:+.4}  ({} repetitions) -> {}",
                report.experiment_id,
                report.summary.pg,
                report.summary.og,
                report.summary.total,
                report.summary.repetitions,
                dir.display()
            );
            for b in &report.bounds {
                println!("  {:<22} {:.6}  {}", b.name, b.value, if b.holds == Some(true) { "holds" } else { "VIOLATED" });
            }
            Ok(())
        }
        Command::Sweep {
            config,
            axis,
            values,
            common,
        } => {
            let cfg = load_config(&config, common.seed)?;
            let axis = match axis {
                AxisArg::K => Axis::K,
                AxisArg::N => Axis::N,
            };
            let opts = RunOptions { workers: common.workers };
            let started = Instant::now();
            let sweep: SweepReport = run_sweep(&cfg, axis, &values, &opts)?;
            let dir = output_dir(common.out, Some(&cfg));
            write_report(&ReportFile::Sweep(sweep.clone()), &dir)?;
            write_timing(&dir, started.elapsed().as_secs_f64(), common.workers)?;
            println!("{} sweep over {:?} -> {}", axis.label(), values, dir.display());
            Ok(())
        }
        Command::Bounds {
            from,
            sigma,
            sigma_part,
            sigma_oos,
            sigma_kl,
            out,
        } => {
            let file = ReportFile::load(&from)?;
            let (sp, so) = (sigma_part.or(sigma), sigma_oos.or(sigma));
            let redo = |r: &crate::harness::ExperimentReport| recompute_bounds(r, sp, so, sigma_kl);
            let updated = match &file {
                ReportFile::Single(r) => ReportFile::Single(Box::new(redo(r)?)),
                ReportFile::Sweep(s) => ReportFile::Sweep(SweepReport {
                    axis: s.axis,
                    values: s.values.clone(),
                    reports: s.reports.iter().map(redo).collect::<Result<_>>()?,
                }),
            };
            let dir = match out {
                Some(d) => d,
                None => from
                    .parent()
                    .map(Path::to_path_buf)
                    .filter(|p| !p.as_os_str().is_empty())
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            write_report(&updated, &dir)?;
            println!("bounds recomputed -> {}", dir.display());
            Ok(())
        }
        Command::Report { from } => {
            if !from.exists() {
                return Err(Error::io(&from, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
            print!("{}", render_metrics(&from)?);
            Ok(())
        }
    }
}
