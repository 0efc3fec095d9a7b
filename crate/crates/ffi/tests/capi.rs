use std::ffi::{CStr, CString};
use std::ptr;

use fedcmi::*;

const CONFIG: &str = r#"{
    "meta": {"family": "gaussian-mean-estimation", "dim": 2, "tau": 0.5, "sigma": 0.5, "domain_radius": 3.0},
    "k": 4, "n": 5,
    "train": {"optimizer": "closed-form-erm", "rounds": 1, "model": {"kind": "mean-vector"}},
    "loss": {"evaluation": "bregman-squared"},
    "estimation": {"z_draws": 2, "u_draws": 3},
    "quantization": {"bits": 8},
    "bounds": {"bregman": true},
    "seed": 7
}"#;

fn last_error() -> String {
    let p = fedcmi_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn config() -> *mut FedcmiConfig {
    let json = CString::new(CONFIG).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { fedcmi_config_from_json(json.as_ptr(), &mut cfg) }, FedcmiStatus::Ok);
    cfg
}

#[test]
fn run_and_query_report() {
    let cfg = config();
    let mut report = ptr::null_mut();
    unsafe {
        assert_eq!(fedcmi_run(cfg, 2, &mut report), FedcmiStatus::Ok);
        let mut gaps = FedcmiGaps::default();
        assert_eq!(fedcmi_report_gaps(report, &mut gaps), FedcmiStatus::Ok);
        assert_eq!(gaps.repetitions, 6);
        assert!((gaps.participation + gaps.out_of_sample - gaps.total).abs() < 1e-12);

        let name = CString::new("bregman-aggregation").unwrap();
        let (mut value, mut holds) = (f64::NAN, 7);
        assert_eq!(fedcmi_report_bound(report, name.as_ptr(), &mut value, &mut holds), FedcmiStatus::Ok);
        assert!(value.is_finite() && value >= 0.0);
        assert!(holds == 0 || holds == 1);

        let missing = CString::new("dp").unwrap();
        assert_eq!(fedcmi_report_bound(report, missing.as_ptr(), &mut value, ptr::null_mut()), FedcmiStatus::NotFound);
        assert!(last_error().contains("dp"));

        let mut json = ptr::null_mut();
        assert_eq!(fedcmi_report_to_json(report, &mut json), FedcmiStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        fedcmi_string_free(json);
        assert!(text.contains("\"experiment_id\""));

        let dir = tempfile::tempdir().unwrap();
        let d = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(fedcmi_report_write(report, d.as_ptr()), FedcmiStatus::Ok);
        assert_eq!(std::fs::read_to_string(dir.path().join("report.json")).unwrap(), text);
        assert!(dir.path().join("metrics.csv").exists());

        fedcmi_report_free(report);
        fedcmi_config_free(cfg);
    }
}

#[test]
fn same_seed_same_json_across_worker_counts() {
    let cfg = config();
    let mut out = Vec::new();
    unsafe {
        assert_eq!(fedcmi_config_set_seed(cfg, 11), FedcmiStatus::Ok);
        for workers in [1, 3] {
            let mut report = ptr::null_mut();
            assert_eq!(fedcmi_run(cfg, workers, &mut report), FedcmiStatus::Ok);
            let mut json = ptr::null_mut();
            assert_eq!(fedcmi_report_to_json(report, &mut json), FedcmiStatus::Ok);
            out.push(CStr::from_ptr(json).to_bytes().to_vec());
            fedcmi_string_free(json);
            fedcmi_report_free(report);
        }
        fedcmi_config_free(cfg);
    }
    assert_eq!(out[0], out[1]);
}

#[test]
fn bad_configs_report_status() {
    let mut cfg = ptr::null_mut();
    let broken = CString::new("{\"k\": 2").unwrap();
    assert_eq!(unsafe { fedcmi_config_from_json(broken.as_ptr(), &mut cfg) }, FedcmiStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().starts_with("invalid config"));

    let zero = CString::new(CONFIG.replace("\"rounds\": 1", "\"rounds\": 0")).unwrap();
    assert_eq!(unsafe { fedcmi_config_from_json(zero.as_ptr(), &mut cfg) }, FedcmiStatus::Parameter);

    assert_eq!(unsafe { fedcmi_config_from_json(ptr::null(), &mut cfg) }, FedcmiStatus::NullArgument);

    let missing = CString::new("/nonexistent/fedcmi.json").unwrap();
    assert_eq!(unsafe { fedcmi_config_from_path(missing.as_ptr(), &mut cfg) }, FedcmiStatus::Io);

    let bad_utf8 = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { fedcmi_config_from_json(bad_utf8.as_ptr().cast(), &mut cfg) },
        FedcmiStatus::InvalidUtf8
    );
}

#[test]
fn run_rejects_null_handles() {
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { fedcmi_run(ptr::null(), 0, &mut report) }, FedcmiStatus::NullArgument);
    let cfg = config();
    assert_eq!(unsafe { fedcmi_run(cfg, 0, ptr::null_mut()) }, FedcmiStatus::NullArgument);
    unsafe {
        fedcmi_config_free(cfg);
        fedcmi_config_free(ptr::null_mut());
        fedcmi_report_free(ptr::null_mut());
        fedcmi_string_free(ptr::null_mut());
    }
}

#[test]
fn information_estimators() {
    let mut v = 0.0;
    let x = [0u32, 1, 0, 1];
    unsafe {
        assert_eq!(fedcmi_plugin_mi(x.as_ptr(), x.as_ptr(), 4, &mut v), FedcmiStatus::Ok);
    }
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

    // Counts 40/10/10/40 over a 2x2 table.
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (a, b, c) in [(0, 0, 40), (0, 1, 10), (1, 0, 10), (1, 1, 40)] {
        xs.extend(std::iter::repeat_n(a, c));
        ys.extend(std::iter::repeat_n(b, c));
    }
    unsafe {
        assert_eq!(fedcmi_plugin_mi(xs.as_ptr(), ys.as_ptr(), xs.len(), &mut v), FedcmiStatus::Ok);
    }
    assert!((v - 0.19274475702175753).abs() < 1e-12);

    // Z decides whether Y copies X, so each stratum carries ln 2 or 0.
    let x = [0u32, 1, 0, 1, 0, 1, 0, 1];
    let y = [0u32, 1, 0, 1, 0, 0, 1, 1];
    let z = [0u32, 0, 0, 0, 1, 1, 1, 1];
    unsafe {
        assert_eq!(fedcmi_plugin_cmi(x.as_ptr(), y.as_ptr(), z.as_ptr(), 8, &mut v), FedcmiStatus::Ok);
    }
    assert!((v - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);

    unsafe {
        assert_eq!(fedcmi_plugin_mi(ptr::null(), ptr::null(), 0, &mut v), FedcmiStatus::Ok);
        assert_eq!(v, 0.0);
        assert_eq!(fedcmi_plugin_mi(ptr::null(), x.as_ptr(), 3, &mut v), FedcmiStatus::NullArgument);
    }
}

#[test]
fn closed_form_calculators() {
    let mut v = 0.0;
    unsafe {
        assert_eq!(fedcmi_solve_c_max(2.0, 1e-12, &mut v), FedcmiStatus::Ok);
        assert!((v - 0.2406059125298019).abs() < 1e-9);
        assert_eq!(fedcmi_solve_c_max(0.5, 1e-12, &mut v), FedcmiStatus::Parameter);

        let eps = [0.1f64; 10];
        assert_eq!(fedcmi_dp_bound(0.1, eps.as_ptr(), 10, 10, &mut v), FedcmiStatus::Ok);
        assert!(v.is_finite() && v > 0.0);
        assert_eq!(fedcmi_dp_bound(0.1, eps.as_ptr(), 10, 0, &mut v), FedcmiStatus::Parameter);

        assert_eq!(fedcmi_comm_constraint_bound(1, 1.0, 10, 1, &mut v), FedcmiStatus::Ok);
        assert!((v - 0.23548200450309492).abs() < 1e-12);
        assert_eq!(fedcmi_comm_constraint_bound(1, 1.0, 10, 1, ptr::null_mut()), FedcmiStatus::NullArgument);
    }
}

#[test]
fn header_lists_every_entry_point() {
    let header = include_str!("../include/fedcmi.h");
    for sym in [
        "fedcmi_last_error",
        "fedcmi_string_free",
        "fedcmi_config_from_json",
        "fedcmi_config_from_path",
        "fedcmi_config_set_seed",
        "fedcmi_config_free",
        "fedcmi_run",
        "fedcmi_report_gaps",
        "fedcmi_report_bound",
        "fedcmi_report_to_json",
        "fedcmi_report_write",
        "fedcmi_report_free",
        "fedcmi_plugin_mi",
        "fedcmi_plugin_cmi",
        "fedcmi_solve_c_max",
        "fedcmi_dp_bound",
        "fedcmi_comm_constraint_bound",
        "typedef struct FedcmiConfig FedcmiConfig;",
        "typedef struct FedcmiReport FedcmiReport;",
    ] {
        assert!(header.contains(sym), "{sym}");
    }
}
