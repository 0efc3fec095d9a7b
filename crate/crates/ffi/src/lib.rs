//! C interface to `fedcmi-core`.
//!
//! Every function returns a [`FedcmiStatus`]. On failure the message is kept
//! per thread and can be read with [`fedcmi_last_error`]. Configurations and
//! reports are opaque handles released with their `_free` function. Strings
//! handed out by the library are released with [`fedcmi_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fedcmi_core::bounds::{comm_constraint_bound, dp_bound, solve_c_max};
use fedcmi_core::harness::{run_experiment, write_report, ExperimentConfig, ExperimentReport, ReportFile, RunOptions};
use fedcmi_core::mi::{plugin_cmi, plugin_mi};
use fedcmi_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FedcmiStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parameter = 3,
    Structural = 4,
    Domain = 5,
    Capability = 6,
    Config = 7,
    Io = 8,
    NotFound = 9,
    Panic = 10,
}

/// Opaque experiment configuration.
pub struct FedcmiConfig {
    inner: ExperimentConfig,
}

/// Opaque experiment report.
pub struct FedcmiReport {
    inner: ExperimentReport,
}

/// Mean gaps over all repetitions and the standard error of each.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FedcmiGaps {
    pub participation: f64,
    pub out_of_sample: f64,
    pub total: f64,
    pub empirical_risk: f64,
    pub participation_stderr: f64,
    pub out_of_sample_stderr: f64,
    pub total_stderr: f64,
    pub repetitions: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> FedcmiStatus {
    match err {
        Error::Parameter(_) => FedcmiStatus::Parameter,
        Error::Structural(_) => FedcmiStatus::Structural,
        Error::Domain(_) => FedcmiStatus::Domain,
        Error::Capability(_) => FedcmiStatus::Capability,
        Error::Config(_) => FedcmiStatus::Config,
        Error::Io { .. } | Error::Idx { .. } => FedcmiStatus::Io,
        Error::Repetition { source, .. } => status_of(source),
    }
}

struct Fail(FedcmiStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FedcmiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FedcmiStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FedcmiStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FedcmiStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FedcmiStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fedcmi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_config_from_json(json: *const c_char, out: *mut *mut FedcmiConfig) -> FedcmiStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_json(text(json, "json")?)?;
        put(out, Box::into_raw(Box::new(FedcmiConfig { inner: cfg })), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_config_from_path(path: *const c_char, out: *mut *mut FedcmiConfig) -> FedcmiStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_path(text(path, "path")?)?;
        put(out, Box::into_raw(Box::new(FedcmiConfig { inner: cfg })), "out")
    })
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_config_set_seed(config: *mut FedcmiConfig, seed: u64) -> FedcmiStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| null("config"))?;
        cfg.inner.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `config` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_config_free(config: *mut FedcmiConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the experiment. `workers == 0` uses the global thread pool.
///
/// # Safety
/// `config` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_run(
    config: *const FedcmiConfig,
    workers: usize,
    out: *mut *mut FedcmiReport,
) -> FedcmiStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = RunOptions {
            workers: (workers > 0).then_some(workers),
        };
        let report = run_experiment(&cfg.inner, &opts)?;
        put(out, Box::into_raw(Box::new(FedcmiReport { inner: report })), "out")
    })
}

/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_report_gaps(report: *const FedcmiReport, out: *mut FedcmiGaps) -> FedcmiStatus {
    guard(|| {
        let s = &report.as_ref().ok_or_else(|| null("report"))?.inner.summary;
        let gaps = FedcmiGaps {
            participation: s.pg,
            out_of_sample: s.og,
            total: s.total,
            empirical_risk: s.emp_risk,
            participation_stderr: s.pg_stderr,
            out_of_sample_stderr: s.og_stderr,
            total_stderr: s.total_stderr,
            repetitions: s.repetitions,
        };
        put(out, gaps, "out")
    })
}

/// Looks up a bound by name. `holds` receives 1, 0, or -1 when the check
/// does not apply. Returns `NOT_FOUND` for bounds that were not evaluated.
///
/// # Safety
/// `report` must be a live handle, `name` a NUL-terminated string, `value`
/// writable; `holds` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_report_bound(
    report: *const FedcmiReport,
    name: *const c_char,
    value: *mut f64,
    holds: *mut i32,
) -> FedcmiStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.inner;
        let name = text(name, "name")?;
        let b = r
            .bound(name)
            .ok_or_else(|| Fail(FedcmiStatus::NotFound, format!("no bound named {name:?}")))?;
        put(value, b.value, "value")?;
        if !holds.is_null() {
            holds.write(b.holds.map_or(-1, i32::from));
        }
        Ok(())
    })
}

/// Serializes the report. Release the string with [`fedcmi_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_report_to_json(report: *const FedcmiReport, out: *mut *mut c_char) -> FedcmiStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.inner;
        let json = fedcmi_core::harness::report_json(&ReportFile::Single(Box::new(r.clone())));
        let s = CString::new(json).map_err(|e| Fail(FedcmiStatus::Parameter, e.to_string()))?;
        put(out, s.into_raw(), "out")
    })
}

/// Writes report.json and metrics.csv into `dir`.
///
/// # Safety
/// `report` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_report_write(report: *const FedcmiReport, dir: *const c_char) -> FedcmiStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.inner;
        let dir = PathBuf::from(text(dir, "dir")?);
        write_report(&ReportFile::Single(Box::new(r.clone())), dir)?;
        Ok(())
    })
}

/// # Safety
/// `report` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_report_free(report: *mut FedcmiReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Plug-in mutual information (nats) of paired discrete samples.
///
/// # Safety
/// `x` and `y` must point to `len` values each.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_plugin_mi(x: *const u32, y: *const u32, len: usize, out: *mut f64) -> FedcmiStatus {
    guard(|| {
        let (x, y) = (slice(x, len, "x")?, slice(y, len, "y")?);
        let pairs: Vec<(u32, u32)> = x.iter().copied().zip(y.iter().copied()).collect();
        put(out, plugin_mi(&pairs).value, "out")
    })
}

/// Plug-in conditional mutual information I(X;Y|Z) in nats.
///
/// # Safety
/// `x`, `y` and `z` must point to `len` values each.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_plugin_cmi(
    x: *const u32,
    y: *const u32,
    z: *const u32,
    len: usize,
    out: *mut f64,
) -> FedcmiStatus {
    guard(|| {
        let (x, y, z) = (slice(x, len, "x")?, slice(y, len, "y")?, slice(z, len, "z")?);
        let triples: Vec<(u32, u32, u32)> = (0..len).map(|i| (x[i], y[i], z[i])).collect();
        put(out, plugin_cmi(&triples).value, "out")
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_solve_c_max(c: f64, tol: f64, out: *mut f64) -> FedcmiStatus {
    guard(|| put(out, solve_c_max(c, tol)?, "out"))
}

/// # Safety
/// `eps_local` must point to `k` values.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_dp_bound(
    eps_global: f64,
    eps_local: *const f64,
    k: usize,
    n: usize,
    out: *mut f64,
) -> FedcmiStatus {
    guard(|| {
        let eps = slice(eps_local, k, "eps_local")?;
        put(out, dp_bound(eps_global, eps, k, n)?, "out")
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedcmi_comm_constraint_bound(
    bits: u32,
    sigma: f64,
    k: usize,
    n: usize,
    out: *mut f64,
) -> FedcmiStatus {
    guard(|| put(out, comm_constraint_bound(bits, sigma, k, n)?, "out"))
}
