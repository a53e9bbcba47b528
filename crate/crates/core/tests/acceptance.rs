//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary (`harness = false`) so the lines always reach stdout.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use quadcert::coeffcalc::{compute_d, ChangeOfVars};
use quadcert::lemmas::{
    check_decomposition, check_lemma76, check_prop75, check_prop_b, check_prop_d, check_xi_identity, LemmaOutcome,
};
use quadcert::matrixcert::{certify, CaseLabel, CertError};
use quadcert::oscint::{
    kernel_decay_scan, resonant_scan, sublevel_measure, vdc_scan, KernelScanConfig, QuadTol, ScanReport,
};
use quadcert::polyring::{rat, rational_from_f64, MultiIndex, Poly, Rational};
use quadcert::quadform::{classify_phase, PhaseFamily, QuadForm, StoppingValue};

const SEED: u64 = 20240611;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn family(theta: &[i64], phases: &[(u32, &str)]) -> PhaseFamily {
    let q = QuadForm::from_i64(theta).expect("signs");
    let n = q.n();
    let map: BTreeMap<u32, Poly> = phases.iter().map(|(j, t)| (*j, Poly::parse(t, n).expect("poly"))).collect();
    PhaseFamily::new(q, map).expect("family")
}

fn suite(outcomes: &[LemmaOutcome]) -> Verdict {
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{} {}/{} {:?}", o.name, o.failures, o.instances, o.notes))
        .collect();
    let total: usize = outcomes.iter().map(|o| o.instances).sum();
    if failed.is_empty() {
        verdict(true, format!("{total} instances, 0 failures"))
    } else {
        verdict(false, failed.join("; "))
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let o = check_decomposition(SEED, 25);
    let secs = start.elapsed().as_secs_f64();
    let v = suite(&[o]);
    verdict(v.pass && secs < 120.0, format!("{}, {secs:.1}s of 120s", v.detail))
}

fn criterion_2() -> Verdict {
    suite(&check_prop_b(SEED + 1, 50))
}

fn criterion_3() -> Verdict {
    let mut outs = check_prop_d(SEED + 2, 50);
    // Q-type powers on each named signature, every sector: classification
    // and vanishing of every order-one D must agree.
    let mut explicit = 0;
    let mut bad = Vec::new();
    for t in [&[1i8, 1][..], &[1, -1], &[1, 1, -1], &[1, -1, -1]] {
        let q = QuadForm::new(t.to_vec()).expect("signs");
        let n = q.n();
        for j in [2u32, 4, 6] {
            let p = q.power(j / 2).scale(&rat(-2));
            let qtype = classify_phase(&p, j, &q).expect("homogeneous").is_qtype();
            for l in 1..=n {
                let cov = ChangeOfVars::new(q.clone(), l).expect("l");
                let zero = (0..n - 1).all(|m| compute_d(&p, j, &MultiIndex::unit(n - 1, m), &cov).is_zero());
                explicit += 1;
                if !(qtype && zero) {
                    bad.push(format!("theta={t:?} j={j} l={l}"));
                }
            }
        }
    }
    let mut extra = LemmaOutcome { name: "D_qtype_signatures".into(), instances: explicit, failures: bad.len(), notes: bad };
    extra.notes.truncate(5);
    outs.push(extra);
    suite(&outs)
}

fn criterion_4() -> Verdict {
    suite(&check_xi_identity(SEED + 3, 20))
}

fn criterion_5() -> Verdict {
    suite(&[check_prop75(&[4, 6], &[2, 3])])
}

fn criterion_6() -> Verdict {
    suite(&[check_lemma76(SEED + 4, 10)])
}

struct Regression {
    theta: &'static [i64],
    phases: &'static [(u32, &'static str)],
    l: usize,
    r: i64,
    nu: &'static [i64],
    want: CaseLabel,
    /// Substring the certificate trace must contain.
    trace: Option<&'static str>,
}

fn regression_set() -> Vec<Regression> {
    let reg = |theta, phases, l, r, nu, want| Regression { theta, phases, l, r, nu, want, trace: None };
    vec![
        reg(&[1, -1], &[(2, "y1*y2")], 2, 10, &[15], CaseLabel::A),
        reg(&[1, -1], &[(2, "y1*y2"), (4, "(y1^2 - y2^2)^2")], 1, 10, &[12, 3], CaseLabel::A),
        reg(&[1, 1, -1], &[(2, "y1*y3 + y2^2"), (3, "y1^3 - y2*y3^2")], 3, 10, &[2, 14], CaseLabel::A),
        reg(&[1, -1], &[(4, "y1^4 - 2 y1^2 y2^2 + y2^4")], 2, 5, &[7], CaseLabel::B1),
        reg(&[1, 1], &[(4, "(y1^2 + y2^2)^2")], 1, 10, &[-13], CaseLabel::B1),
        reg(&[1, -1, 1], &[(4, "(y1^2 - y2^2 + y3^2)^2")], 2, 10, &[10], CaseLabel::B1),
        reg(&[1, -1], &[(2, "y1^2 + y2^2"), (4, "y1^4 - 2 y1^2 y2^2 + y2^4")], 2, 10, &[0, 10], CaseLabel::B2Sub1),
        reg(&[1, 1], &[(2, "y1*y2"), (4, "y1^4 + 2 y1^2 y2^2 + y2^4")], 2, 10, &[0, 10], CaseLabel::B2Sub2),
        reg(&[1, 1, -1], &[(2, "y1*y2 + y3^2"), (4, "(y1^2 + y2^2 - y3^2)^2")], 1, 10, &[1, 12], CaseLabel::B2Sub2),
        reg(&[1, -1], &[(2, "y1*y2"), (4, "y1^4 - 2 y1^2 y2^2 + y2^4")], 2, 10, &[0, 10], CaseLabel::B2Sub4),
        reg(
            &[1, 1, -1],
            &[(2, "y1*y3 + y2^2"), (3, "y1^3"), (4, "(y1^2 + y2^2 - y3^2)^2")],
            3,
            10,
            &[0, 0, 10],
            CaseLabel::B2Sub4,
        ),
        // m = 1 pairs two coordinates where p2 is Q-type; m = 2 certifies
        Regression {
            theta: &[1, 1, -1],
            phases: &[(2, "y1^2 + y2^2 + 3 y3^2"), (4, "(y1^2 + y2^2 - y3^2)^2")],
            l: 1,
            r: 10,
            nu: &[0, 10],
            want: CaseLabel::B2Sub4,
            trace: Some("subcase 3"),
        },
    ]
}

fn criterion_7() -> Verdict {
    let mut bad = Vec::new();
    let mut labels = Vec::new();
    let set = regression_set();
    for (i, reg) in set.iter().enumerate() {
        let f = family(reg.theta, reg.phases);
        let cov = ChangeOfVars::new(f.q().clone(), reg.l).expect("l");
        let sv = StoppingValue::new(rat(reg.r), reg.nu.iter().map(|&x| rat(x)).collect());
        match certify(&f, &sv, &cov) {
            Ok(cert) => {
                let rep = cert.recheck(&f, true);
                let trace_ok = reg.trace.map_or(true, |t| cert.trace.iter().any(|s| s.contains(t)));
                labels.push(format!("{:?}", cert.case));
                if cert.case != reg.want || !rep.passed() || !trace_ok {
                    bad.push(format!(
                        "family {}: case {:?} want {:?}, recheck failures {:?}, trace {:?}",
                        i + 1,
                        cert.case,
                        reg.want,
                        rep.failures(),
                        cert.trace
                    ));
                }
            }
            Err(e) => bad.push(format!("family {}: {e}", i + 1)),
        }
    }
    let forbidden: [(&[i64], &[(u32, &str)], &str); 4] = [
        (&[1, -1], &[(2, "3 y1^2 - 3 y2^2"), (4, "y1^4")], "QuadraticIsQ"),
        (&[1, 1, -1], &[(2, "-y1^2 - y2^2 + y3^2")], "QuadraticIsQ"),
        (&[1, -1], &[(1, "y1 + 2 y2"), (2, "y1*y2")], "LinearPhase"),
        (&[1], &[(3, "y1^3")], "DimensionTooSmall"),
    ];
    for (theta, phases, want) in forbidden {
        let f = family(theta, phases);
        let cov = ChangeOfVars::new(f.q().clone(), 1).expect("l");
        let sv = StoppingValue::new(rat(10), vec![rat(10); f.len()]);
        match certify(&f, &sv, &cov) {
            Err(e @ CertError::Rejected(_)) if e.code() == want => {}
            other => bad.push(format!("expected {want}, got {:?}", other.map(|c| c.case))),
        }
    }
    let covered: std::collections::BTreeSet<&String> = labels.iter().collect();
    if bad.is_empty() {
        verdict(true, format!("{} families certified and rechecked, cases {covered:?}; 4 forbidden inputs rejected", set.len()))
    } else {
        verdict(false, bad.join("; "))
    }
}

/// `int_0^1 e^{i lambda x^2} dx` to `O(lambda^-2)`, by integrating the
/// tail `int_1^inf` by parts once.
fn fresnel_asymptotic(lambda: f64) -> Complex64 {
    let head = Complex64::from_polar((std::f64::consts::PI / lambda).sqrt() / 2.0, std::f64::consts::FRAC_PI_4);
    // int_1^inf e^{i lambda x^2} dx = -e^{i lambda} / (2 i lambda) + O(lambda^-2)
    let tail = -Complex64::from_polar(1.0, lambda) / Complex64::new(0.0, 2.0 * lambda);
    head - tail
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    let q = Poly::parse("x1^2", 1).expect("poly");
    let lambdas = [1e2, 1e3, 1e4];
    let scan = match vdc_scan(&q, &lambdas, &[(0.0, 1.0)], &QuadTol::default()) {
        Ok(s) => s,
        Err(e) => return verdict(false, e.to_string()),
    };
    let slope = scan.slope.unwrap_or(f64::NAN);
    let mut notes = vec![format!("slope {slope:.4}")];
    let mut pass = (slope + 0.5).abs() <= 0.05;
    for p in &scan.points {
        let want = fresnel_asymptotic(p.lambda).norm();
        let ok = (p.modulus - want).abs() <= 1.0 / (p.lambda * p.lambda);
        pass &= ok;
        if !ok {
            notes.push(format!("lambda {}: modulus {} vs asymptotic {want}", p.lambda, p.modulus));
        }
    }
    let x = Poly::parse("x1", 1).expect("poly");
    let cases = [
        (x.clone(), 0.1, 0.2),
        (x.scale(&rat(50)), 0.1, 0.004),
        (Poly::parse("x1^2 + x2^2", 2).expect("poly"), 0.1, std::f64::consts::PI * 0.1),
    ];
    for (p, rho, want) in cases {
        match sublevel_measure(&p, rho) {
            Ok(est) => {
                let err = (est.measure - want).abs() / want;
                pass &= err <= 0.10;
                notes.push(format!("|{{|{}| <= {rho}}}| = {:.5} vs {want:.5}", p.to_text(), est.measure));
            }
            Err(e) => {
                pass = false;
                notes.push(e.to_string());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    notes.push(format!("{secs:.1}s of 60s"));
    verdict(pass, notes.join(", "))
}

struct KernelRun {
    report: ScanReport,
    control_ratio: f64,
    elapsed: Duration,
    mu_samples: usize,
}

fn kernel_run() -> Result<KernelRun, String> {
    let start = Instant::now();
    let f = family(&[1, -1], &[(2, "y1*y2")]);
    let cfg = KernelScanConfig::standard(&f, 2, vec![10.0, 1e2, 1e3, 1e4], 18, 8, 10, 7);
    let r0 = cfg.radii[0];
    let to_rat = |x: f64| -> Rational { rational_from_f64(x).expect("finite") };
    let sv = StoppingValue::new(to_rat(r0), cfg.nu_at(r0).into_iter().map(to_rat).collect());
    let cov = ChangeOfVars::new(f.q().clone(), cfg.l).expect("l");
    let cert = certify(&f, &sv, &cov).map_err(|e| e.to_string())?;
    let report = kernel_decay_scan(&cfg, &f, &cert).map_err(|e| e.to_string())?;
    let mut phases = f.phases().clone();
    phases.insert(2, f.q().poly());
    let control = PhaseFamily::new(f.q().clone(), phases).expect("family");
    let rep = resonant_scan(&cfg, &control).map_err(|e| e.to_string())?;
    Ok(KernelRun { report, control_ratio: rep.min_ratio, elapsed: start.elapsed(), mu_samples: cfg.mu_samples })
}

fn criterion_9(run: &Result<KernelRun, String>) -> Verdict {
    let run = match run {
        Ok(r) => r,
        Err(e) => return verdict(false, e.clone()),
    };
    let s = &run.report.summary;
    let slope = s.slope_outside.unwrap_or(f64::NAN);
    let maxima: Vec<String> = s.radii.iter().map(|r| format!("{:.3e}", r.max_outside.unwrap_or(f64::NAN))).collect();
    let fractions: Vec<String> = s.radii.iter().map(|r| format!("{:.3}", r.bad_fraction)).collect();
    let pass = slope <= -0.01
        && s.fractions_nonincreasing
        && s.grid_points >= 1000
        && run.mu_samples == 10
        && s.radii.iter().all(|r| r.trivial_bound_ok)
        && run.control_ratio >= 0.5
        && run.elapsed.as_secs() < 15 * 60;
    verdict(
        pass,
        format!(
            "{} (u,tau) points, max outside {maxima:?}, slope {slope:.3}, bad fractions {fractions:?}, \
             control ratio {:.3}, {:.0}s",
            s.grid_points,
            run.control_ratio,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_10(run: &Result<KernelRun, String>) -> Verdict {
    let run = match run {
        Ok(r) => r,
        Err(e) => return verdict(false, e.clone()),
    };
    let s = &run.report.summary;
    let identical = s.radii.iter().all(|r| r.bitmap_digests.len() == run.mu_samples && r.bitmap_digests.windows(2).all(|w| w[0] == w[1]));
    verdict(
        identical && s.mu_independent,
        format!("{} radii x {} mu samples, bitmaps identical: {identical}", s.radii.len(), run.mu_samples),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Verdict, f64)> = Vec::new();
    let mut timed = |k: u32, name: &'static str, f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let v = f();
        results.push((k, name, v, t.elapsed().as_secs_f64()));
    };
    timed(1, "decomposition exactness", &criterion_1);
    timed(2, "B property suite", &criterion_2);
    timed(3, "D biconditional", &criterion_3);
    timed(4, "Xi identity", &criterion_4);
    timed(5, "subcase-1 monomial coefficient", &criterion_5);
    timed(6, "A/B/C/D/E closed forms", &criterion_6);
    timed(7, "end-to-end certification", &criterion_7);
    timed(8, "van der Corput trends", &criterion_8);
    let kernel = kernel_run();
    timed(9, "kernel decay trend", &|| criterion_9(&kernel));
    timed(10, "mu-independence of bad sets", &|| criterion_10(&kernel));
    let mut ok = true;
    for (k, name, v, secs) in &results {
        ok &= v.pass;
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {k:>2} {tag} {name}: {} [{secs:.1}s]", v.detail);
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
