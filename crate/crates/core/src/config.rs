//! TOML run configuration.
//!
//! ```toml
//! n = 2
//! theta = [1, -1]            # or a symmetric matrix [[1, 0], [0, -4]]
//! l = 2                      # sector coordinate, 1-based (default n)
//! seed = 7
//!
//! [phases]
//! 2 = "u1*u2"
//! 4 = { "(4,0)" = "1", "(0,4)" = "-1/2" }
//!
//! [stopping]                 # certify / expand
//! r = "10"
//! nu = ["15"]
//!
//! [scan]                     # kernel-scan
//! radii = [10, 100, 1000, 10000]
//! u_per_axis = 18
//! tau_count = 8
//! mu_samples = 10
//! negative_control = true
//!
//! [vdc]                      # vdc-scan
//! phase = "u1^2"
//! lambdas = [100, 1000, 10000]
//! box = [[0, 1]]
//! sublevel = [{ phase = "u1", rho = 0.1, expected = 0.2 }]
//! ```
//!
//! A matrix `theta` is diagonalized by rational congruence; the phases are
//! then rewritten in the normalized coordinates, which needs every pivot to
//! be a rational square up to sign.

use std::collections::BTreeMap;

use serde::Deserialize;
use toml::{Spanned, Value};

use crate::oscint::{KernelScanConfig, QuadTol};
use crate::polyring::{parse_rational, rat, rational_to_f64, Poly, Rational};
use crate::quadform::{
    change_coordinates, exact_normalizing_matrix, hex_sha256, normalize_quadratic_form, PhaseFamily, QuadForm,
    StoppingValue,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(src: &str, span: std::ops::Range<usize>, message: impl Into<String>) -> Self {
        ConfigError { line: Some(line_of(src, span.start)), message: message.into() }
    }

    fn plain(message: impl Into<String>) -> Self {
        ConfigError { line: None, message: message.into() }
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    n: Spanned<i64>,
    theta: Spanned<Value>,
    l: Option<Spanned<i64>>,
    seed: Option<u64>,
    #[serde(default)]
    phases: BTreeMap<Spanned<String>, Spanned<Value>>,
    stopping: Option<RawStopping>,
    scan: Option<RawScan>,
    vdc: Option<RawVdc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStopping {
    r: Spanned<Value>,
    nu: Spanned<Vec<Value>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawScan {
    radii: Option<Vec<f64>>,
    u_per_axis: Option<usize>,
    tau_count: Option<usize>,
    mu_samples: Option<usize>,
    eps1: Option<f64>,
    eps2: Option<f64>,
    c0: Option<f64>,
    tol_abs: Option<f64>,
    tol_rel: Option<f64>,
    negative_control: Option<bool>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawVdc {
    phase: Option<Spanned<String>>,
    dims: Option<usize>,
    lambdas: Option<Vec<f64>>,
    #[serde(rename = "box")]
    omega: Option<Vec<[f64; 2]>>,
    sublevel: Option<Vec<RawSublevel>>,
    fit_count: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSublevel {
    phase: Spanned<String>,
    dims: Option<usize>,
    rho: f64,
    expected: Option<f64>,
}

/// Scan parameters after defaults are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSection {
    pub radii: Vec<f64>,
    pub u_per_axis: usize,
    pub tau_count: usize,
    pub mu_samples: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub c0: Option<f64>,
    pub tol: QuadTol,
    pub negative_control: bool,
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            radii: vec![10.0, 100.0, 1000.0, 10000.0],
            u_per_axis: 18,
            tau_count: 8,
            mu_samples: 10,
            eps1: 0.2,
            eps2: 0.6,
            c0: None,
            tol: QuadTol::default(),
            negative_control: false,
        }
    }
}

/// A sublevel-set test case; without `expected` the estimate is compared
/// with a grid ten times finer.
#[derive(Debug, Clone, PartialEq)]
pub struct SublevelCase {
    pub phase: Poly,
    pub rho: f64,
    pub expected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VdcSection {
    pub phase: Poly,
    pub lambdas: Vec<f64>,
    pub omega: Vec<(f64, f64)>,
    pub sublevel: Vec<SublevelCase>,
    pub fit_count: usize,
}

impl Default for VdcSection {
    fn default() -> Self {
        let x = Poly::parse("u1", 1).expect("literal");
        VdcSection {
            phase: Poly::parse("u1^2", 1).expect("literal"),
            lambdas: vec![1e2, 1e3, 1e4],
            omega: vec![(0.0, 1.0)],
            sublevel: vec![
                SublevelCase { phase: x.clone(), rho: 0.1, expected: Some(0.2) },
                SublevelCase { phase: x.scale(&rat(50)), rho: 0.1, expected: Some(0.004) },
                // the disc of radius sqrt(rho)
                SublevelCase {
                    phase: Poly::parse("u1^2 + u2^2", 2).expect("literal"),
                    rho: 0.1,
                    expected: Some(std::f64::consts::PI * 0.1),
                },
            ],
            fit_count: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub family: PhaseFamily,
    /// 1-based sector coordinate.
    pub l: usize,
    pub seed: u64,
    pub stopping: Option<StoppingValue>,
    pub scan: ScanSection,
    pub vdc: VdcSection,
    /// SHA-256 of the configuration text.
    pub source_hash: String,
}

impl RunConfig {
    /// The configured stopping value, or `r = 10` with every `nu_j = 15/|Lambda|`.
    pub fn stopping_or_default(&self) -> StoppingValue {
        self.stopping.clone().unwrap_or_else(|| {
            let k = self.family.len().max(1) as i64;
            StoppingValue::new(rat(10), vec![Rational::new(15.into(), k.into()); self.family.len()])
        })
    }

    pub fn kernel_scan_config(&self) -> KernelScanConfig {
        let s = &self.scan;
        let mut cfg = KernelScanConfig::standard(
            &self.family,
            self.l,
            s.radii.clone(),
            s.u_per_axis,
            s.tau_count,
            s.mu_samples,
            self.seed,
        );
        cfg.eps1 = s.eps1;
        cfg.eps2 = s.eps2;
        cfg.c0_override = s.c0;
        cfg.tol = s.tol;
        cfg
    }
}

fn rational_value(src: &str, v: &Spanned<Value>) -> Result<Rational, ConfigError> {
    value_to_rational(v.get_ref()).map_err(|m| ConfigError::at(src, v.span(), m))
}

fn value_to_rational(v: &Value) -> Result<Rational, String> {
    match v {
        Value::Integer(i) => Ok(rat(*i)),
        Value::String(s) => parse_rational(s).map_err(|e| e.to_string()),
        other => Err(format!("expected an integer or a rational string, found {}", other.type_str())),
    }
}

fn parse_theta(src: &str, n: usize, v: &Spanned<Value>) -> Result<(QuadForm, Option<Vec<Vec<Rational>>>), ConfigError> {
    let err = |m: String| ConfigError::at(src, v.span(), m);
    let Value::Array(items) = v.get_ref() else {
        return Err(err("theta must be a list of signs or a matrix".into()));
    };
    if items.len() != n {
        return Err(err(format!("theta has {} entries but n = {n}", items.len())));
    }
    if items.iter().all(|x| matches!(x, Value::Array(_))) {
        let rows: Vec<Vec<Rational>> = items
            .iter()
            .map(|row| match row {
                Value::Array(r) => r.iter().map(value_to_rational).collect::<Result<Vec<_>, _>>(),
                _ => unreachable!(),
            })
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let norm = normalize_quadratic_form(&rows).map_err(|e| err(e.to_string()))?;
        let m = exact_normalizing_matrix(&norm).ok_or_else(|| {
            err("matrix theta needs pivots that are rational squares up to sign; give the diagonal signs instead".into())
        })?;
        return Ok((norm.form, Some(m)));
    }
    let signs: Vec<i64> = items
        .iter()
        .map(|x| x.as_integer().ok_or_else(|| err("theta entries must be integers +1 or -1".into())))
        .collect::<Result<_, _>>()?;
    Ok((QuadForm::from_i64(&signs).map_err(|e| err(e.to_string()))?, None))
}

fn parse_poly(src: &str, v: &Spanned<Value>, n: usize) -> Result<Poly, ConfigError> {
    let err = |m: String| ConfigError::at(src, v.span(), m);
    match v.get_ref() {
        Value::String(s) => Poly::parse(s, n).map_err(|e| err(e.to_string())),
        Value::Table(t) => {
            let map: BTreeMap<String, String> = t
                .iter()
                .map(|(k, x)| match x {
                    Value::String(s) => Ok((k.clone(), s.clone())),
                    Value::Integer(i) => Ok((k.clone(), i.to_string())),
                    _ => Err(err(format!("coefficient of {k} must be a string or integer"))),
                })
                .collect::<Result<_, _>>()?;
            Poly::from_json_map(n, &map).map_err(|e| err(e.to_string()))
        }
        other => Err(err(format!("phase must be text or a map, found {}", other.type_str()))),
    }
}

fn parse_text_poly(src: &str, s: &Spanned<String>, n: usize) -> Result<Poly, ConfigError> {
    Poly::parse(s.get_ref(), n).map_err(|e| ConfigError::at(src, s.span(), e.to_string()))
}

fn count_vars(text: &str) -> usize {
    let mut best = 0;
    let b = text.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'u' {
            let j = b[i + 1..].iter().take_while(|c| c.is_ascii_digit()).count();
            if let Ok(k) = text[i + 1..i + 1 + j].parse::<usize>() {
                best = best.max(k);
            }
            i += j;
        }
        i += 1;
    }
    best.max(1)
}

impl std::str::FromStr for RunConfig {
    type Err = ConfigError;

    fn from_str(src: &str) -> Result<Self, ConfigError> {
        let raw: Raw = toml::from_str(src).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of(src, s.start)),
            message: e.message().to_string(),
        })?;
        let n_val = *raw.n.get_ref();
        if n_val < 1 {
            return Err(ConfigError::at(src, raw.n.span(), "n must be positive"));
        }
        let n = n_val as usize;
        let (q, transform) = parse_theta(src, n, &raw.theta)?;
        let mut phases = BTreeMap::new();
        for (key, val) in &raw.phases {
            let j: u32 = key
                .get_ref()
                .trim()
                .parse()
                .map_err(|_| ConfigError::at(src, key.span(), format!("phase key {:?} is not a degree", key.get_ref())))?;
            let mut p = parse_poly(src, val, n)?;
            if let Some(m) = &transform {
                p = change_coordinates(&p, m);
            }
            phases.insert(j, p);
        }
        let family = PhaseFamily::new(q, phases).map_err(|e| ConfigError::plain(e.to_string()))?;
        let l = match &raw.l {
            None => n,
            Some(v) => {
                let x = *v.get_ref();
                if x < 1 || x as usize > n {
                    return Err(ConfigError::at(src, v.span(), format!("l must lie in 1..={n}")));
                }
                x as usize
            }
        };
        let stopping = match &raw.stopping {
            None => None,
            Some(s) => {
                let r = rational_value(src, &s.r)?;
                let nu = s
                    .nu
                    .get_ref()
                    .iter()
                    .map(value_to_rational)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|m| ConfigError::at(src, s.nu.span(), m))?;
                if nu.len() != family.len() {
                    return Err(ConfigError::at(
                        src,
                        s.nu.span(),
                        format!("nu has {} entries but the family has {} nonzero phases", nu.len(), family.len()),
                    ));
                }
                Some(StoppingValue::new(r, nu))
            }
        };
        let mut scan = ScanSection::default();
        if let Some(s) = raw.scan {
            let d = ScanSection::default();
            scan = ScanSection {
                radii: s.radii.unwrap_or(d.radii),
                u_per_axis: s.u_per_axis.unwrap_or(d.u_per_axis),
                tau_count: s.tau_count.unwrap_or(d.tau_count),
                mu_samples: s.mu_samples.unwrap_or(d.mu_samples),
                eps1: s.eps1.unwrap_or(d.eps1),
                eps2: s.eps2.unwrap_or(d.eps2),
                c0: s.c0,
                tol: QuadTol {
                    abs: s.tol_abs.unwrap_or(d.tol.abs),
                    rel: s.tol_rel.unwrap_or(d.tol.rel),
                    ..d.tol
                },
                negative_control: s.negative_control.unwrap_or(false),
            };
        }
        let mut vdc = VdcSection::default();
        if let Some(v) = raw.vdc {
            if let Some(p) = &v.phase {
                let k = v.dims.unwrap_or_else(|| count_vars(p.get_ref()));
                vdc.phase = parse_text_poly(src, p, k)?;
                vdc.omega = vec![(0.0, 1.0 / (k as f64).sqrt()); k];
            }
            if let Some(ls) = v.lambdas {
                vdc.lambdas = ls;
            }
            if let Some(b) = v.omega {
                vdc.omega = b.iter().map(|[a, c]| (*a, *c)).collect();
            }
            if vdc.omega.len() != vdc.phase.nvars() {
                return Err(ConfigError::plain("vdc box dimension differs from the phase dimension"));
            }
            if let Some(cases) = v.sublevel {
                vdc.sublevel = cases
                    .iter()
                    .map(|c| {
                        let k = c.dims.unwrap_or_else(|| count_vars(c.phase.get_ref()));
                        Ok(SublevelCase { phase: parse_text_poly(src, &c.phase, k)?, rho: c.rho, expected: c.expected })
                    })
                    .collect::<Result<_, ConfigError>>()?;
            }
            if let Some(k) = v.fit_count {
                vdc.fit_count = k;
            }
        }
        Ok(RunConfig {
            family,
            l,
            seed: raw.seed.unwrap_or(0),
            stopping,
            scan,
            vdc,
            source_hash: hex_sha256(src.as_bytes()),
        })
    }
}

/// `r` as a float, for reports.
pub fn stopping_radius(sv: &StoppingValue) -> f64 {
    rational_to_f64(&sv.r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_basic_family() {
        let cfg: RunConfig = "n = 2\ntheta = [1, -1]\n[phases]\n2 = \"u1*u2\"\n".parse().unwrap();
        assert_eq!(cfg.family.n(), 2);
        assert_eq!(cfg.l, 2);
        assert_eq!(cfg.family.phase(2).unwrap().to_text(), Poly::parse("u1*u2", 2).unwrap().to_text());
        let sv = cfg.stopping_or_default();
        assert!(sv.in_range());
    }

    #[test]
    fn map_form_and_stopping() {
        let src = "n = 2\ntheta = [1, 1]\nl = 1\n[phases]\n4 = { \"(4,0)\" = \"1\", \"(0,4)\" = -2 }\n[stopping]\nr = 10\nnu = [\"31/2\"]\n";
        let cfg: RunConfig = src.parse().unwrap();
        assert_eq!(cfg.family.phase(4).unwrap().to_text(), Poly::parse("u1^4 - 2*u2^4", 2).unwrap().to_text());
        assert_eq!(cfg.stopping.unwrap().nu[0], Rational::new(31.into(), 2.into()));
        assert_eq!(cfg.l, 1);
    }

    #[test]
    fn errors_carry_lines() {
        let e = "n = 2\ntheta = [1, -1]\n[phases]\n2 = \"u1*+u2\"\n".parse::<RunConfig>().unwrap_err();
        assert_eq!(e.line, Some(4));
        let e = "n = 2\ntheta = [1, 3]\n".parse::<RunConfig>().unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = "n = 2\ntheta = [1, -1]\nbogus = 1\n".parse::<RunConfig>().unwrap_err();
        assert_eq!(e.line, Some(3));
        let e = "n = 2\ntheta = [1, -1]\n[phases]\n2 = \"u1*u2\"\n[stopping]\nr = 10\nnu = [1, 2]\n".parse::<RunConfig>().unwrap_err();
        assert_eq!(e.line, Some(7));
    }

    #[test]
    fn matrix_theta_is_normalized() {
        // Q = y1^2 - 4 y2^2; y2 = y2'/2 maps p2 = y1 y2 to y1' y2' / 2
        let src = "n = 2\ntheta = [[1, 0], [0, -4]]\n[phases]\n2 = \"u1*u2\"\n";
        let cfg: RunConfig = src.parse().unwrap();
        assert_eq!(cfg.family.q().theta(), &[1, -1]);
        assert_eq!(cfg.family.phase(2).unwrap().to_text(), Poly::parse("1/2*u1*u2", 2).unwrap().to_text());
        let e = "n = 2\ntheta = [[1, 0], [0, -3]]\n".parse::<RunConfig>().unwrap_err();
        assert_eq!(e.line, Some(2));
    }
}
