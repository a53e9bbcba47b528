use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CASE_A: &str = r#"
n = 2
theta = [1, -1]
seed = 11

[phases]
2 = "u1*u2"

[stopping]
r = 10
nu = [15]
"#;

const QUADRATIC_IS_Q: &str = r#"
n = 2
theta = [1, -1]

[phases]
2 = "3*u1^2 - 3*u2^2"
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadcert"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn quadcert")
}

fn diagnostics(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap()
}

#[test]
fn certify_case_a_passes_recheck() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.toml", CASE_A);
    let out = dir.path().join("out");
    let o = run(&["certify"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join("recheck.log")).unwrap();
    assert!(log.contains("witness_nonzero: pass"));
    assert!(log.contains("overall: pass"));
    let doc: Value = serde_json::from_str(&fs::read_to_string(out.join("certificate.json")).unwrap()).unwrap();
    assert_eq!(doc["seed"], 11);
    assert_eq!(doc["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.toml", CASE_A);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run(&["certify"], &cfg, out).status.code(), Some(0));
        assert_eq!(run(&["check-lemmas", "--seed", "3"], &cfg, out).status.code(), Some(0));
    }
    for name in ["certificate.json", "lemmas.tsv", "lemmas.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn quadratic_equal_to_q_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "q.toml", QUADRATIC_IS_Q);
    let out = dir.path().join("out");
    let o = run(&["certify"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    let d = diagnostics(&out);
    assert_eq!(d["reason"], "QuadraticIsQ");
    assert_eq!(d["status"], "rejected");
    let stderr: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(stderr, d);
}

#[test]
fn parse_errors_exit_with_input_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "n = 2\ntheta = [1, -1]\n[phases]\n2 = \"u1*(u2\"\n");
    let out = dir.path().join("out");
    let o = run(&["certify"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    let d = diagnostics(&out);
    assert_eq!(d["reason"], "InvalidInput");
    assert!(d["message"].as_str().unwrap().contains("line 4"), "{d}");

    let cfg = write_config(dir.path(), "typo.toml", "n = 2\ntheta = [1, -1]\nthetta = 3\n[phases]\n2 = \"u1*u2\"\n");
    assert_eq!(run(&["certify"], &cfg, &out).status.code(), Some(1));
}

#[test]
fn subcommand_flag_and_expand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.toml", CASE_A);
    let out = dir.path().join("out");
    let o = run(&["--subcommand", "expand"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(out.join("expansion.txt")).unwrap();
    assert!(text.starts_with("# config sha256 "));
    assert!(text.contains("[gamma (1)]") && text.contains("B2 = "));
    let o = run(&["certify", "--subcommand", "expand"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn vdc_scan_defaults_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.toml", CASE_A);
    let out = dir.path().join("out");
    let o = run(&["vdc-scan"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s: Value = serde_json::from_str(&fs::read_to_string(out.join("vdc_scan_summary.json")).unwrap()).unwrap();
    let slope = s["slope"].as_f64().unwrap();
    assert!((slope + 0.5).abs() <= 0.05);
    assert!(s["failed"].as_array().unwrap().is_empty());
    let csv = fs::read_to_string(out.join("vdc_scan.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn small_kernel_scan_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{CASE_A}\n[scan]\nradii = [10, 100]\nu_per_axis = 8\ntau_count = 3\nmu_samples = 3\n");
    let cfg = write_config(dir.path(), "k.toml", &body);
    let out = dir.path().join("out");
    let o = run(&["kernel-scan"], &cfg, &out);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("kernel_scan.csv")).unwrap();
    assert!(csv.starts_with("r,u1,u2,tau,re,im,abs,in_Gnu,in_Fu,mu_sample_id"));
    let s: Value = serde_json::from_str(&fs::read_to_string(out.join("kernel_scan_summary.json")).unwrap()).unwrap();
    assert_eq!(s["scan"]["mu_independent"], true);
}
