use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_fedcmi");

const CONFIG: &str = r#"{
    "meta": {"family": "gaussian-mean-estimation", "dim": 2, "tau": 0.5, "sigma": 0.5, "domain_radius": 3.0},
    "k": 4, "n": 5,
    "train": {"optimizer": "closed-form-erm", "rounds": 1, "model": {"kind": "mean-vector"}},
    "loss": {"evaluation": "bregman-squared"},
    "estimation": {"z_draws": 2, "u_draws": 4},
    "quantization": {"bits": 8},
    "bounds": {"bregman": true, "heterogeneity_kl": true},
    "seed": 1
}"#;

fn fedcmi(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("FEDCMI_OUTPUT_DIR")
        .output()
        .expect("spawn fedcmi")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let out = dir.path().join("out");
    let o = fedcmi(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "metrics.csv", "timing.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("experiment_id,axis,axis_value,seed,emp_risk,pg_est,og_est,gap_est,gap_stderr,"));
    assert!(csv.contains(",bregman-aggregation,"));
    assert!(!csv.contains('\r'));
    let report = json(&out.join("report.json"));
    assert_eq!(report["summary"]["repetitions"], 8);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(fedcmi(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]).status.code(), Some(0));
    let o = fedcmi(&["run", "--config", &cfg, "--seed", "9", "--out", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let (ra, rb) = (json(&a.join("report.json")), json(&b.join("report.json")));
    assert_eq!(rb["config"]["seed"], 9);
    assert_ne!(ra["experiment_id"], rb["experiment_id"]);
    assert_ne!(ra["repetitions"], rb["repetitions"]);
}

#[test]
fn config_output_dir_and_env_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-config");
    let text = CONFIG.replacen("\"seed\": 1", &format!("\"seed\": 1, \"output_dir\": {:?}", target.to_str().unwrap()), 1);
    let cfg = write_config(dir.path(), "c.json", &text);
    assert_eq!(fedcmi(&["run", "--config", &cfg]).status.code(), Some(0));
    assert!(target.join("report.json").exists());

    let plain = write_config(dir.path(), "p.json", CONFIG);
    let env_dir = dir.path().join("from-env");
    let o = Command::new(BIN)
        .args(["run", "--config", &plain])
        .env("FEDCMI_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(env_dir.join("metrics.csv").exists());
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad_json = write_config(dir.path(), "bad.json", "{\"k\": 3,");
    let o = fedcmi(&["run", "--config", &bad_json]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid config"));

    let unknown = write_config(dir.path(), "u.json", &CONFIG.replacen("\"k\": 4", "\"k\": 4, \"clients\": 4", 1));
    assert_eq!(fedcmi(&["run", "--config", &unknown]).status.code(), Some(1));

    let zero = write_config(dir.path(), "z.json", &CONFIG.replacen("\"rounds\": 1", "\"rounds\": 0", 1));
    assert_eq!(fedcmi(&["run", "--config", &zero]).status.code(), Some(1));

    let no_quant = CONFIG.replacen("\"quantization\": {\"bits\": 8},", "", 1);
    let nq = write_config(dir.path(), "nq.json", &no_quant);
    assert_eq!(fedcmi(&["run", "--config", &nq]).status.code(), Some(1));

    assert_eq!(fedcmi(&["run"]).status.code(), Some(1));
    assert_eq!(fedcmi(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fedcmi(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    assert_eq!(fedcmi(&["report", "--from", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(fedcmi(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn bounds_recompute_keeps_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let first = dir.path().join("first");
    assert_eq!(fedcmi(&["run", "--config", &cfg, "--out", first.to_str().unwrap()]).status.code(), Some(0));
    let second = dir.path().join("second");
    let o = fedcmi(&[
        "bounds",
        "--from",
        first.join("report.json").to_str().unwrap(),
        "--sigma",
        "2",
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (json(&first.join("report.json")), json(&second.join("report.json")));
    for key in ["summary", "repetitions", "cmi", "slot_train_losses", "experiment_id"] {
        assert_eq!(a[key].to_string(), b[key].to_string(), "{key}");
    }
    let value = |r: &Value, name: &str| {
        r["bounds"]
            .as_array()
            .unwrap()
            .iter()
            .find(|e| e["name"] == name)
            .unwrap()["value"]
            .as_f64()
            .unwrap()
    };
    let ratio = value(&b, "bregman-aggregation") / value(&a, "bregman-aggregation");
    assert!((ratio - 2.0).abs() < 1e-12, "{ratio}");
    assert_eq!(value(&a, "sqrt-ecmi"), value(&b, "sqrt-ecmi"));

    let csv_a = std::fs::read_to_string(first.join("metrics.csv")).unwrap();
    let csv_b = std::fs::read_to_string(second.join("metrics.csv")).unwrap();
    let gaps = |s: &str| s.lines().map(|l| l.split(',').take(9).collect::<Vec<_>>().join(",")).collect::<Vec<_>>();
    assert_eq!(gaps(&csv_a), gaps(&csv_b));

    // Without --out the stored report is rewritten in place.
    let o = fedcmi(&["bounds", "--from", second.join("report.json").to_str().unwrap(), "--sigma-kl", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let c = json(&second.join("report.json"));
    assert_eq!(c["config"]["bounds"]["sigma_kl"], 3.0);
}

#[test]
fn sweep_and_report_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let out = dir.path().join("sweep");
    let o = fedcmi(&["sweep", "--config", &cfg, "--axis", "n", "--values", "2,3,5,8", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.join("report.json"));
    assert_eq!(report["reports"].as_array().unwrap().len(), 4);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 4);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("n")));

    let o = fedcmi(&["report", "--from", out.join("metrics.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().next().unwrap().starts_with("axis"));
    assert_eq!(table.lines().count(), 2 + 16);

    let bad = fedcmi(&["sweep", "--config", &cfg, "--axis", "K", "--values", "4,2", "--out", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
}
