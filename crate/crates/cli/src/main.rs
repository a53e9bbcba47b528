//! `quadcert`: batch front end.
//!
//! Exit status: 0 when every check passes, 1 for gate rejections and bad
//! input, 2 for invariant violations and failed checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde_json::{json, Value};

use quadcert::coeffcalc::{expand_phase_in_sigma, ChangeOfVars, CoeffError};
use quadcert::config::{RunConfig, SublevelCase};
use quadcert::lemmas;
use quadcert::matrixcert::{certify, CertError};
use quadcert::oscint::{
    base_panels, fixed_panel_integral, kernel_decay_scan, resonant_scan, sublevel_constant_fit, sublevel_measure,
    sublevel_measure_with, vdc_scan, OscError, ScanReport,
};
use quadcert::polyring::rational_from_f64;
use quadcert::quadform::{PhaseFamily, StoppingValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sub {
    Certify,
    Expand,
    CheckLemmas,
    KernelScan,
    VdcScan,
}

#[derive(Parser, Debug)]
#[command(name = "quadcert", version, about = "Decay certificates and kernel scans for quadratic-surface oscillatory kernels")]
struct Cli {
    /// Subcommand (alternatively --subcommand).
    #[arg(value_enum)]
    command: Option<Sub>,
    #[arg(long = "subcommand", value_enum)]
    subcommand: Option<Sub>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "quadcert-out")]
    out: PathBuf,
    /// Seed for randomized ensembles; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Relative quadrature tolerance.
    #[arg(long, env = "QUADCERT_QUAD_TOL")]
    quad_tol: Option<f64>,
    /// Worker threads for quadrature and grids.
    #[arg(long, env = "QUADCERT_THREADS")]
    threads: Option<usize>,
}

enum Failure {
    Input(String),
    Rejected { reason: String, message: String },
    Invariant(String),
    ChecksFailed(Vec<String>),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) | Failure::Rejected { .. } => 1,
            Failure::Invariant(_) | Failure::ChecksFailed(_) => 2,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Failure::Input(m) => json!({"status": "error", "reason": "InvalidInput", "message": m}),
            Failure::Rejected { reason, message } => json!({"status": "rejected", "reason": reason, "message": message}),
            Failure::Invariant(m) => json!({"status": "error", "reason": "InvariantViolation", "message": m}),
            Failure::ChecksFailed(list) => json!({"status": "failed", "reason": "ChecksFailed", "failed": list}),
        }
    }
}

fn from_cert_error(e: CertError) -> Failure {
    let reason = e.code().to_string();
    let message = e.to_string();
    if e.is_rejection() {
        Failure::Rejected { reason, message }
    } else {
        match e {
            CertError::NoDominantIndex | CertError::AllCoordinatesQType { .. } => Failure::Rejected { reason, message },
            _ => Failure::Invariant(message),
        }
    }
}

fn from_osc_error(e: OscError) -> Failure {
    match e {
        OscError::Config(m) | OscError::CertMismatch(m) => Failure::Input(m),
        other => Failure::Invariant(other.to_string()),
    }
}

struct Ctx {
    out: PathBuf,
    seed: u64,
    config: Option<RunConfig>,
    quad_tol: Option<f64>,
}

impl Ctx {
    fn config(&self) -> Result<&RunConfig, Failure> {
        self.config.as_ref().ok_or_else(|| Failure::Input("this subcommand needs --config".into()))
    }

    fn config_hash(&self) -> Value {
        self.config.as_ref().map(|c| Value::String(c.source_hash.clone())).unwrap_or(Value::Null)
    }

    fn write(&self, name: &str, body: &str) -> Result<(), Failure> {
        fs::write(self.out.join(name), body).map_err(|e| Failure::Input(format!("cannot write {name}: {e}")))
    }

    fn write_json(&self, name: &str, v: &Value) -> Result<(), Failure> {
        self.write(name, &(serde_json::to_string_pretty(v).expect("json") + "\n"))
    }

    fn csv_writer(&self, name: &str) -> Result<csv::Writer<fs::File>, Failure> {
        csv::Writer::from_path(self.out.join(name)).map_err(|e| Failure::Input(format!("cannot write {name}: {e}")))
    }
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::Input(format!("csv output: {e}"))
}

fn cov_for(cfg: &RunConfig) -> Result<ChangeOfVars, Failure> {
    ChangeOfVars::new(cfg.family.q().clone(), cfg.l).map_err(|e| Failure::Input(e.to_string()))
}

fn run_certify(ctx: &Ctx) -> Result<Vec<String>, Failure> {
    let cfg = ctx.config()?;
    let sv = cfg.stopping_or_default();
    let cert = certify(&cfg.family, &sv, &cov_for(cfg)?).map_err(from_cert_error)?;
    let recheck = cert.recheck(&cfg.family, true);
    let doc = cert.to_doc(Some(recheck.clone()));
    let body = json!({
        "config_sha256": ctx.config_hash(),
        "seed": ctx.seed,
        "certificate": serde_json::to_value(&doc).expect("json"),
    });
    ctx.write_json("certificate.json", &body)?;
    let mut log = String::new();
    let v = serde_json::to_value(&recheck).expect("json");
    if let Value::Object(m) = &v {
        for (k, x) in m {
            log.push_str(&format!("{k}: {}\n", if x.as_bool() == Some(true) { "pass" } else { "FAIL" }));
        }
    }
    log.push_str(&format!("w_at_witness: {}\n", doc.w_at_witness));
    log.push_str(&format!("overall: {}\n", if recheck.passed() { "pass" } else { "FAIL" }));
    ctx.write("recheck.log", &log)?;
    println!("certified: case {:?}, gamma {}, d0 {}, digest {}", cert.case, cert.gamma, cert.d0, doc.digest);
    Ok(recheck.failures().into_iter().map(String::from).collect())
}

fn run_expand(ctx: &Ctx) -> Result<Vec<String>, Failure> {
    let cfg = ctx.config()?;
    let exp = expand_phase_in_sigma(&cfg.family, &cov_for(cfg)?).map_err(|e| match e {
        CoeffError::Inadmissible(r) => Failure::Rejected { reason: r.code().into(), message: r.to_string() },
        other => Failure::Input(other.to_string()),
    })?;
    let body = format!(
        "# config sha256 {}\n# family sha256 {}\n# sector l = {}\n{}",
        cfg.source_hash,
        cfg.family.hash_hex(),
        cfg.l,
        exp.to_text()
    );
    ctx.write("expansion.txt", &body)?;
    println!("expanded {} sigma-coefficients", exp.coeffs.len());
    Ok(Vec::new())
}

fn run_check_lemmas(ctx: &Ctx) -> Result<Vec<String>, Failure> {
    let outcomes = lemmas::run_all(ctx.seed);
    let mut table = String::from("check\tinstances\tfailures\tstatus\n");
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for o in &outcomes {
        let status = if o.passed() { "pass" } else { "FAIL" };
        table.push_str(&format!("{}\t{}\t{}\t{}\n", o.name, o.instances, o.failures, status));
        rows.push(json!({"name": o.name, "instances": o.instances, "failures": o.failures, "notes": o.notes}));
        if !o.passed() {
            failed.push(o.name.clone());
        }
    }
    print!("{table}");
    ctx.write("lemmas.tsv", &table)?;
    ctx.write_json("lemmas.json", &json!({"seed": ctx.seed, "config_sha256": ctx.config_hash(), "checks": rows}))?;
    Ok(failed)
}

fn write_scan_csv(ctx: &Ctx, n: usize, report: &ScanReport) -> Result<(), Failure> {
    let mut w = ctx.csv_writer("kernel_scan.csv")?;
    w.write_record(ScanReport::csv_header(n)).map_err(csv_err)?;
    for row in &report.rows {
        w.write_record(ScanReport::csv_record(row)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Failure::Input(e.to_string()))
}

/// The family with `p2` replaced by `Q`.
fn quadratic_control(f: &PhaseFamily) -> PhaseFamily {
    let mut phases = f.phases().clone();
    phases.insert(2, f.q().poly());
    PhaseFamily::new(f.q().clone(), phases).expect("same dimension")
}

fn run_kernel_scan(ctx: &Ctx) -> Result<Vec<String>, Failure> {
    let cfg = ctx.config()?;
    let mut scan = cfg.kernel_scan_config();
    scan.seed = ctx.seed;
    if let Some(t) = ctx.quad_tol {
        scan.tol.rel = t;
    }
    let r0 = scan.radii.first().copied().ok_or_else(|| Failure::Input("no radii".into()))?;
    let to_rat = |x: f64| rational_from_f64(x).ok_or_else(|| Failure::Input(format!("non-finite value {x}")));
    let sv = StoppingValue::new(to_rat(r0)?, scan.nu_at(r0).into_iter().map(to_rat).collect::<Result<_, _>>()?);
    let cert = certify(&cfg.family, &sv, &cov_for(cfg)?).map_err(from_cert_error)?;
    let report = kernel_decay_scan(&scan, &cfg.family, &cert).map_err(from_osc_error)?;
    write_scan_csv(ctx, cfg.family.n(), &report)?;
    let s = &report.summary;
    let mut failed = Vec::new();
    if !s.slope_outside.is_some_and(|x| x <= -0.01) {
        failed.push("decay_slope".to_string());
    }
    if !s.slope_outside_resonant.is_some_and(|x| x < -0.01) {
        failed.push("decay_slope_resonant".to_string());
    }
    if !s.fractions_nonincreasing {
        failed.push("bad_set_fractions".to_string());
    }
    if !s.mu_independent {
        failed.push("mu_independence".to_string());
    }
    if !s.radii.iter().all(|r| r.trivial_bound_ok) {
        failed.push("trivial_bound".to_string());
    }
    let control = if cfg.scan.negative_control {
        let fq = quadratic_control(&cfg.family);
        let rep = resonant_scan(&scan, &fq).map_err(from_osc_error)?;
        if !(rep.min_ratio >= 0.5) {
            failed.push("negative_control".to_string());
        }
        serde_json::to_value(&rep).expect("json")
    } else {
        Value::Null
    };
    let summary = json!({
        "config_sha256": ctx.config_hash(),
        "seed": ctx.seed,
        "certificate_digest": cert.to_doc(None).digest,
        "scan": serde_json::to_value(s).expect("json"),
        "negative_control": control,
        "failed": failed,
    });
    ctx.write_json("kernel_scan_summary.json", &summary)?;
    println!(
        "kernel-scan: slope {:?}, resonant slope {:?}, C0 {:.4}, fractions non-increasing {}, mu-independent {}",
        s.slope_outside, s.slope_outside_resonant, s.thresholds.c0, s.fractions_nonincreasing, s.mu_independent
    );
    Ok(failed)
}

fn sublevel_entry(case: &SublevelCase) -> Result<Value, Failure> {
    let est = sublevel_measure(&case.phase, case.rho).map_err(from_osc_error)?;
    let (expected, source) = match case.expected {
        Some(v) => (v, "closed form"),
        None => {
            let fine = sublevel_measure_with(&case.phase, case.rho, est.cells_per_axis * 10).map_err(from_osc_error)?;
            (fine.measure, "10x finer grid")
        }
    };
    let rel = (est.measure - expected).abs() / expected.abs().max(f64::MIN_POSITIVE);
    Ok(json!({
        "phase": case.phase.to_text(),
        "rho": case.rho,
        "measure": est.measure,
        "cells_per_axis": est.cells_per_axis,
        "expected": expected,
        "expected_from": source,
        "relative_error": rel,
        "passes": rel <= 0.10,
    }))
}

fn run_vdc_scan(ctx: &Ctx) -> Result<Vec<String>, Failure> {
    let default_cfg;
    let vdc = match &ctx.config {
        Some(c) => &c.vdc,
        None => {
            default_cfg = quadcert::config::VdcSection::default();
            &default_cfg
        }
    };
    let mut tol = quadcert::oscint::QuadTol::default();
    if let Some(t) = ctx.quad_tol {
        tol.rel = t;
    }
    let scan = vdc_scan(&vdc.phase, &vdc.lambdas, &vdc.omega, &tol).map_err(from_osc_error)?;
    let mut w = ctx.csv_writer("vdc_scan.csv")?;
    w.write_record(["lambda", "modulus", "bound", "reference"]).map_err(csv_err)?;
    let mut points = Vec::new();
    for p in &scan.points {
        let scaled = vdc.phase.scale(&rational_from_f64(p.lambda).expect("finite"));
        let reference = fixed_panel_integral(&scaled, &vdc.omega, 8 * base_panels(p.lambda)).norm();
        w.write_record([p.lambda, p.modulus, p.bound, reference].map(|x| x.to_string())).map_err(csv_err)?;
        points.push(json!({"lambda": p.lambda, "modulus": p.modulus, "bound": p.bound, "reference": reference}));
    }
    w.flush().map_err(|e| Failure::Input(e.to_string()))?;
    let sublevel: Vec<Value> = vdc.sublevel.iter().map(sublevel_entry).collect::<Result<_, _>>()?;
    let mut fits = Vec::new();
    for (n, d) in [(1usize, 2u32), (2, 2)] {
        let fit = sublevel_constant_fit(ctx.seed, n, d, vdc.fit_count, 0.05).map_err(from_osc_error)?;
        fits.push(serde_json::to_value(&fit).expect("json"));
    }
    let mut failed = Vec::new();
    if !scan.passes {
        failed.push("vdc_slope".to_string());
    }
    for (i, s) in sublevel.iter().enumerate() {
        if s["passes"] != json!(true) {
            failed.push(format!("sublevel_case_{}", i + 1));
        }
    }
    for f in &fits {
        if f["stable"] != json!(true) {
            failed.push(format!("sublevel_constant_n{}", f["n"]));
        }
    }
    let summary = json!({
        "config_sha256": ctx.config_hash(),
        "seed": ctx.seed,
        "phase": scan.phase,
        "degree": scan.degree,
        "slope": scan.slope,
        "points": points,
        "sublevel": sublevel,
        "sublevel_fits": fits,
        "failed": failed,
    });
    ctx.write_json("vdc_scan_summary.json", &summary)?;
    println!("vdc-scan: slope {:?} (degree {})", scan.slope, scan.degree);
    Ok(failed)
}

fn run(cli: Cli) -> Result<(), (Failure, Option<PathBuf>)> {
    let sub = match (cli.command, cli.subcommand) {
        (Some(a), Some(b)) if a != b => {
            return Err((Failure::Input("positional subcommand and --subcommand disagree".into()), None))
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => return Err((Failure::Input("no subcommand given".into()), None)),
    };
    fs::create_dir_all(&cli.out)
        .map_err(|e| (Failure::Input(format!("cannot create {}: {e}", cli.out.display())), None))?;
    let config = match &cli.config {
        None => None,
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| (Failure::Input(format!("cannot read {}: {e}", p.display())), Some(cli.out.clone())))?;
            Some(text.parse::<RunConfig>().map_err(|e| (Failure::Input(format!("{}: {e}", p.display())), Some(cli.out.clone())))?)
        }
    };
    if let Some(k) = cli.threads {
        // ignore a second initialization; the first width wins
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k.max(1)).build_global();
    }
    let seed = cli.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(0);
    let ctx = Ctx { out: cli.out.clone(), seed, config, quad_tol: cli.quad_tol };
    let result = match sub {
        Sub::Certify => run_certify(&ctx),
        Sub::Expand => run_expand(&ctx),
        Sub::CheckLemmas => run_check_lemmas(&ctx),
        Sub::KernelScan => run_kernel_scan(&ctx),
        Sub::VdcScan => run_vdc_scan(&ctx),
    };
    match result {
        Ok(failed) if failed.is_empty() => Ok(()),
        Ok(failed) => Err((Failure::ChecksFailed(failed), Some(ctx.out))),
        Err(f) => Err((f, Some(ctx.out))),
    }
}

fn report(f: &Failure, out: Option<&Path>) {
    let v = f.to_json();
    eprintln!("{v}");
    if let Some(dir) = out {
        let _ = fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(&v).expect("json") + "\n");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((f, out)) => {
            report(&f, out.as_deref());
            ExitCode::from(f.exit_code())
        }
    }
}
