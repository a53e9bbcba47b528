//! Numerical side: quadrature for `K_sharp` and `K_flat`, the two van der
//! Corput checks, and decay scans whose bad sets come from a certificate.
//!
//! Everything here is double precision. Certified polynomials are converted
//! to `f64` once per scan.

use std::sync::OnceLock;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coeffcalc::{expand_phase_in_sigma_ungated, z_from_coords, ChangeOfVars, CoeffError};
use crate::matrixcert::{classify_case, Certificate};
use crate::polyring::{rational_from_f64, rational_to_f64, CompiledHomo, F64Poly, MultiIndex, Poly};
use crate::quadform::{hex_sha256, PhaseFamily, StoppingValue};

/// Largest ambient dimension handled by the kernel integrators.
pub const MAX_DIM: usize = 8;

const GL_ORDER: usize = 16;

/// Sup of `|grad eta|` for `eta(x) = (1 - |x|^2)^2`, attained at `|x|^2 = 1/3`.
const ETA_GRAD_MAX: f64 = 1.539_600_717_839_002; // 8 / (3 sqrt 3)

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OscError {
    #[error("quadrature did not converge after {panels} panels per axis (last change {change:e}, value {value:e})")]
    NonConvergence { panels: usize, change: f64, value: f64 },
    #[error("dimension {0} is outside 1..={MAX_DIM}")]
    Dimension(usize),
    #[error("invalid scan configuration: {0}")]
    Config(String),
    #[error("certificate does not match the scan: {0}")]
    CertMismatch(String),
    #[error("phase has no non-constant coefficients")]
    ConstantPhase,
    #[error("{0}")]
    Coords(#[from] CoeffError),
}

// ---------------------------------------------------------------------------
// Quadrature

/// Nodes and weights of the `m`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; m];
    let mut ws = vec![0.0; m];
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for k in 0..m {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * k + 1) as f64 * z * p2 - k as f64 * p3) / (k + 1) as f64;
            }
            let pp = m as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                ws[i] = 2.0 / ((1.0 - z * z) * pp * pp);
                break;
            }
        }
        xs[i] = -z;
    }
    (xs, ws)
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(GL_ORDER))
}

/// Stopping rule for dyadic refinement: accept once two successive values
/// differ by at most `max(abs, rel * |value|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadTol {
    pub abs: f64,
    pub rel: f64,
    pub max_doublings: u32,
    /// Budget on integrand evaluations for a single refinement level.
    pub max_level_evals: u64,
}

impl Default for QuadTol {
    fn default() -> Self {
        QuadTol { abs: 1e-8, rel: 1e-3, max_doublings: 14, max_level_evals: 40_000_000 }
    }
}

impl QuadTol {
    fn accepts(&self, prev: Complex64, cur: Complex64) -> bool {
        (cur - prev).norm() <= self.abs.max(self.rel * cur.norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: Complex64,
    /// Panels per axis at the accepted level.
    pub panels: usize,
    pub evals: u64,
}

impl QuadResult {
    fn zero() -> Self {
        QuadResult { value: Complex64::new(0.0, 0.0), panels: 0, evals: 0 }
    }
}

/// Integration region: a box in the leading coordinates and, for the last
/// coordinate, an interval that may depend on the leading ones.
pub struct Region<'a> {
    pub outer: Vec<(f64, f64)>,
    pub inner: &'a (dyn Fn(&[f64]) -> Option<(f64, f64)> + Sync),
}

impl Region<'_> {
    fn dims(&self) -> usize {
        self.outer.len() + 1
    }
}

/// Composite Gauss-Legendre with `panels` panels on every axis.
pub fn integrate_fixed<F>(region: &Region, f: &F, panels: usize) -> Complex64
where
    F: Fn(&[f64]) -> Complex64 + ?Sized,
{
    let mut t = [0.0; MAX_DIM];
    nested(region, f, panels, 0, &mut t)
}

fn nested<F>(region: &Region, f: &F, panels: usize, dim: usize, t: &mut [f64; MAX_DIM]) -> Complex64
where
    F: Fn(&[f64]) -> Complex64 + ?Sized,
{
    let k = region.dims();
    let (lo, hi) = if dim < region.outer.len() {
        region.outer[dim]
    } else {
        match (region.inner)(&t[..dim]) {
            Some(iv) => iv,
            None => return Complex64::new(0.0, 0.0),
        }
    };
    if hi <= lo {
        return Complex64::new(0.0, 0.0);
    }
    let (xs, ws) = rule();
    let h = (hi - lo) / panels as f64;
    let mut acc = Complex64::new(0.0, 0.0);
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * h;
        for (x, w) in xs.iter().zip(ws) {
            t[dim] = mid + 0.5 * h * x;
            let v = if dim + 1 == k { f(&t[..k]) } else { nested(region, f, panels, dim + 1, t) };
            acc += v * *w;
        }
    }
    acc * (0.5 * h)
}

/// Doubles the panel count from `base` until two successive levels agree.
pub fn integrate_adaptive<F>(region: &Region, f: &F, base: usize, tol: &QuadTol) -> Result<QuadResult, OscError>
where
    F: Fn(&[f64]) -> Complex64 + ?Sized,
{
    let k = region.dims() as u32;
    let level_evals = |p: usize| ((GL_ORDER * p) as u64).saturating_pow(k);
    let mut panels = base.max(1);
    let mut evals = level_evals(panels);
    let mut prev = integrate_fixed(region, f, panels);
    let mut change = f64::INFINITY;
    for _ in 0..tol.max_doublings {
        let next = panels * 2;
        if level_evals(next) > tol.max_level_evals {
            break;
        }
        let cur = integrate_fixed(region, f, next);
        evals += level_evals(next);
        change = (cur - prev).norm();
        panels = next;
        if tol.accepts(prev, cur) {
            return Ok(QuadResult { value: cur, panels, evals });
        }
        prev = cur;
    }
    Err(OscError::NonConvergence { panels, change, value: prev.norm() })
}

/// Panels per axis at the coarsest level: grows like the square root of the
/// phase size.
pub fn base_panels(phase_scale: f64) -> usize {
    (phase_scale.max(1.0).sqrt().ceil() as usize).max(2)
}

/// `{t : |c + t m| <= 1}`.
fn ball_interval(c: &[f64], m: &[f64]) -> Option<(f64, f64)> {
    let a: f64 = m.iter().map(|x| x * x).sum();
    let b: f64 = 2.0 * c.iter().zip(m).map(|(x, y)| x * y).sum::<f64>();
    let cc: f64 = c.iter().map(|x| x * x).sum::<f64>() - 1.0;
    if a == 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * a * cc;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    Some(((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)))
}

fn intersect(a: Option<(f64, f64)>, b: Option<(f64, f64)>) -> Option<(f64, f64)> {
    let (a, b) = (a?, b?);
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    (hi > lo).then_some((lo, hi))
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Bump and phases

/// `Psi(u, z) = scale * eta(u + z) * eta(z)` with `eta(x) = max(0, 1 - |x|^2)^2`,
/// plus the sector constant `c0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BumpSpec {
    pub c0: f64,
    pub scale: f64,
}

impl BumpSpec {
    /// `c0 = 1/(2 sqrt n)`, scale chosen so that `sup |Psi| + |grad_sigma Psi| <= 1`.
    pub fn standard(n: usize) -> Self {
        BumpSpec { c0: 1.0 / (2.0 * (n as f64).sqrt()), scale: 1.0 / (1.0 + 2.0 * ETA_GRAD_MAX) }
    }

    pub fn eta(x: &[f64]) -> f64 {
        let t = 1.0 - x.iter().map(|v| v * v).sum::<f64>();
        if t > 0.0 {
            t * t
        } else {
            0.0
        }
    }

    pub fn psi(&self, u: &[f64], z: &[f64]) -> f64 {
        let mut uz = [0.0; MAX_DIM];
        for (i, (a, b)) in u.iter().zip(z).enumerate() {
            uz[i] = a + b;
        }
        self.scale * Self::eta(&uz[..u.len()]) * Self::eta(z)
    }

    /// Upper bound for `|Psi| + |grad_sigma Psi|`. The sigma-Jacobian of `z`
    /// has operator norm at most one.
    pub fn c1_sigma_bound(&self) -> f64 {
        self.scale * (1.0 + 2.0 * ETA_GRAD_MAX)
    }

    /// `|u_l| >= c0 |u|` with `u != 0`.
    pub fn in_sector(&self, u: &[f64], l: usize) -> bool {
        let r = norm(u);
        r > 0.0 && u[l].abs() >= self.c0 * r
    }

    /// Smallest index among the coordinates of largest modulus (0-based).
    pub fn sector_of(u: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..u.len() {
            if u[i].abs() > u[best].abs() {
                best = i;
            }
        }
        best
    }

    /// `sup Psi * vol{|sigma| <= 1/c0}`, the trivial bound for `K_sharp`.
    pub fn sharp_trivial_bound(&self, n: usize) -> f64 {
        self.scale * ball_volume(n - 1, 1.0 / self.c0)
    }

    /// `sup Psi * vol(B_1)`, the trivial bound for `K_flat`.
    pub fn flat_trivial_bound(&self, n: usize) -> f64 {
        self.scale * ball_volume(n, 1.0)
    }
}

/// Volume of the radius-`r` ball in `R^k` (`k = 0` gives 1).
pub fn ball_volume(k: usize, r: f64) -> f64 {
    let mut v = [1.0, 2.0];
    let mut out = if k == 0 { 1.0 } else { 2.0 };
    for d in 2..=k {
        out = v[0] * 2.0 * std::f64::consts::PI / d as f64;
        v = [v[1], out];
    }
    out * r.powi(k as i32)
}

/// The phases `p_j`, `j` in `Lambda`, as floating-point polynomials.
#[derive(Debug, Clone)]
pub struct PhaseSet {
    n: usize,
    polys: Vec<F64Poly>,
}

impl PhaseSet {
    pub fn from_family(f: &PhaseFamily) -> Self {
        PhaseSet { n: f.n(), polys: f.phases().values().map(Poly::to_f64).collect() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.polys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polys.is_empty()
    }

    /// `P_c(x) = sum_k c_k p_{j_k}(x)`.
    pub fn eval(&self, c: &[f64], x: &[f64]) -> f64 {
        self.polys.iter().zip(c).map(|(p, ck)| ck * p.eval(x)).sum()
    }

    /// `P_nu(u + z) - P_mu(z)`.
    pub fn kernel_phase(&self, nu: &[f64], mu: &[f64], u: &[f64], z: &[f64]) -> f64 {
        let mut uz = [0.0; MAX_DIM];
        for (i, (a, b)) in u.iter().zip(z).enumerate() {
            uz[i] = a + b;
        }
        self.eval(nu, &uz[..self.n]) - self.eval(mu, z)
    }
}

fn l1(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

/// `K_sharp(u, tau)` for sector `cov.l()`. Zero outside the sector, for
/// `|tau| >= 1` and for `|u| >= 2`.
#[allow(clippy::too_many_arguments)]
pub fn eval_k_sharp(
    phases: &PhaseSet,
    nu: &[f64],
    mu: &[f64],
    u: &[f64],
    tau: f64,
    cov: &ChangeOfVars,
    spec: &BumpSpec,
    tol: &QuadTol,
) -> Result<QuadResult, OscError> {
    let n = u.len();
    if !(2..=MAX_DIM).contains(&n) || n != phases.n() {
        return Err(OscError::Dimension(n));
    }
    let l = cov.l();
    if !spec.in_sector(u, l) || tau.abs() >= 1.0 || norm(u) >= 2.0 {
        return Ok(QuadResult::zero());
    }
    // z is affine in sigma: z = base + sum_i sigma_i col_i
    let zero = vec![0.0; n - 1];
    let base = z_from_coords(u, tau, &zero, cov)?;
    let cols: Vec<Vec<f64>> = (0..n - 1)
        .map(|i| {
            let mut e = zero.clone();
            e[i] = 1.0;
            let z = z_from_coords(u, tau, &e, cov)?;
            Ok(z.iter().zip(&base).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_, OscError>>()?;
    let bound = norm(u) / u[l].abs();
    let point = |t: &[f64], out: &mut [f64; MAX_DIM]| {
        for i in 0..n {
            out[i] = base[i] + t.iter().zip(&cols).map(|(s, c)| s * c[i]).sum::<f64>();
        }
    };
    let last = &cols[n - 2];
    let inner = |t: &[f64]| {
        let mut c = [0.0; MAX_DIM];
        point(t, &mut c);
        let mut cu = [0.0; MAX_DIM];
        for i in 0..n {
            cu[i] = c[i] + u[i];
        }
        intersect(ball_interval(&c[..n], last), ball_interval(&cu[..n], last))
    };
    let region = Region { outer: vec![(-bound, bound); n - 2], inner: &inner };
    let f = |t: &[f64]| {
        let mut z = [0.0; MAX_DIM];
        point(t, &mut z);
        let z = &z[..n];
        let w = spec.psi(u, z);
        if w == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        Complex64::from_polar(w, phases.kernel_phase(nu, mu, u, z))
    };
    integrate_adaptive(&region, &f, base_panels(l1(nu) + l1(mu)), tol)
}

/// `K_flat(u) = int e^{i(P_nu(u+z) - P_mu(z))} Psi(u, z) dz` over `R^n`.
pub fn eval_k_flat(
    phases: &PhaseSet,
    nu: &[f64],
    mu: &[f64],
    u: &[f64],
    spec: &BumpSpec,
    tol: &QuadTol,
) -> Result<QuadResult, OscError> {
    let n = u.len();
    if !(1..=MAX_DIM).contains(&n) || n != phases.n() {
        return Err(OscError::Dimension(n));
    }
    if norm(u) >= 2.0 {
        return Ok(QuadResult::zero());
    }
    let mut e = vec![0.0; n];
    e[n - 1] = 1.0;
    let inner = |t: &[f64]| {
        let mut c = [0.0; MAX_DIM];
        c[..n - 1].copy_from_slice(t);
        let mut cu = [0.0; MAX_DIM];
        for i in 0..n {
            cu[i] = c[i] + u[i];
        }
        intersect(ball_interval(&c[..n], &e), ball_interval(&cu[..n], &e))
    };
    let region = Region { outer: vec![(-1.0, 1.0); n - 1], inner: &inner };
    let f = |z: &[f64]| {
        let w = spec.psi(u, z);
        if w == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        Complex64::from_polar(w, phases.kernel_phase(nu, mu, u, z))
    };
    integrate_adaptive(&region, &f, base_panels(l1(nu) + l1(mu)), tol)
}

// ---------------------------------------------------------------------------
// Van der Corput checks

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VdcCheck {
    pub re: f64,
    pub im: f64,
    pub modulus: f64,
    /// Sum of the absolute non-constant coefficients.
    pub lambda_norm: f64,
    pub degree: u32,
    /// `lambda_norm^{-1/degree}`
    pub bound: f64,
}

/// `|int_Omega e^{i Q(x)} psi(x) dx|` next to `||lambda||^{-1/d}`, with
/// `Omega` a box inside the unit ball.
pub fn vdc_integral_check(
    q: &Poly,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    omega: &[(f64, f64)],
    tol: &QuadTol,
) -> Result<VdcCheck, OscError> {
    let n = q.nvars();
    if n == 0 || n > MAX_DIM || omega.len() != n {
        return Err(OscError::Dimension(n));
    }
    let corner: f64 = omega.iter().map(|(a, b)| a.abs().max(b.abs()).powi(2)).sum::<f64>().sqrt();
    if corner > 1.0 + 1e-12 || omega.iter().any(|(a, b)| b < a) {
        return Err(OscError::Config("integration box must be a box inside the unit ball".into()));
    }
    let lambda_norm: f64 = q.terms().filter(|(m, _)| m.degree() > 0).map(|(_, c)| rational_to_f64(c).abs()).sum();
    if lambda_norm == 0.0 {
        return Err(OscError::ConstantPhase);
    }
    let degree = q.total_degree().unwrap_or(0);
    let qf = q.to_f64();
    let (lo, hi) = omega[n - 1];
    let inner = move |_: &[f64]| Some((lo, hi));
    let region = Region { outer: omega[..n - 1].to_vec(), inner: &inner };
    let f = |x: &[f64]| Complex64::from_polar(psi(x), qf.eval(x));
    let res = integrate_adaptive(&region, &f, base_panels(lambda_norm), tol)?;
    Ok(VdcCheck {
        re: res.value.re,
        im: res.value.im,
        modulus: res.value.norm(),
        lambda_norm,
        degree,
        bound: lambda_norm.powf(-1.0 / degree as f64),
    })
}

/// `int_Omega e^{i Q(x)} dx` with a fixed number of panels per axis, used
/// as a high-resolution reference.
pub fn fixed_panel_integral(q: &Poly, omega: &[(f64, f64)], panels: usize) -> Complex64 {
    let n = omega.len();
    let qf = q.to_f64();
    let (lo, hi) = omega[n - 1];
    let inner = move |_: &[f64]| Some((lo, hi));
    let region = Region { outer: omega[..n - 1].to_vec(), inner: &inner };
    let f = |x: &[f64]| Complex64::from_polar(1.0, qf.eval(x));
    integrate_fixed(&region, &f, panels)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        xs.iter().zip(ys).filter(|(x, y)| **x > 0.0 && **y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VdcScanPoint {
    pub lambda: f64,
    pub modulus: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VdcScan {
    pub phase: String,
    pub degree: u32,
    pub points: Vec<VdcScanPoint>,
    pub slope: Option<f64>,
    /// `slope <= -1/degree + 0.05`
    pub passes: bool,
}

/// Integrates `e^{i lambda Q}` (with `psi = 1`) for each `lambda` and fits
/// the decay exponent.
pub fn vdc_scan(q: &Poly, lambdas: &[f64], omega: &[(f64, f64)], tol: &QuadTol) -> Result<VdcScan, OscError> {
    let one = |_: &[f64]| 1.0;
    let mut points = Vec::new();
    let mut degree = 0;
    for &lam in lambdas {
        let scaled = q.scale(&rational_from_f64(lam).ok_or_else(|| OscError::Config(format!("bad lambda {lam}")))?);
        let c = vdc_integral_check(&scaled, &one, omega, tol)?;
        degree = c.degree;
        points.push(VdcScanPoint { lambda: lam, modulus: c.modulus, bound: c.bound });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.lambda).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.modulus).collect();
    let slope = loglog_slope(&xs, &ys);
    let passes = slope.is_some_and(|s| degree > 0 && s <= -1.0 / degree as f64 + 0.05);
    Ok(VdcScan { phase: q.to_text(), degree, points, slope, passes })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SublevelEstimate {
    pub measure: f64,
    pub cells_per_axis: usize,
    pub cell_width: f64,
}

/// Default grid resolution on `B_1(R^n)`.
pub fn default_cells(n: usize) -> usize {
    match n {
        1 => 1 << 20,
        2 => 512,
        3 => 128,
        _ => 32,
    }
}

/// Cell-counting estimate of `|{x in B_1 : |Q(x)| <= rho}|`.
pub fn sublevel_measure(q: &Poly, rho: f64) -> Result<SublevelEstimate, OscError> {
    sublevel_measure_with(q, rho, default_cells(q.nvars()))
}

pub fn sublevel_measure_with(q: &Poly, rho: f64, cells: usize) -> Result<SublevelEstimate, OscError> {
    let n = q.nvars();
    if n == 0 || n > MAX_DIM {
        return Err(OscError::Dimension(n));
    }
    if !(rho > 0.0) {
        return Err(OscError::Config("rho must be positive".into()));
    }
    let qf = q.to_f64();
    let h = 2.0 / cells as f64;
    let center = |i: usize| -1.0 + (i as f64 + 0.5) * h;
    // the outermost axis is split across threads
    let count: u64 = (0..cells)
        .into_par_iter()
        .map(|i0| {
            let mut idx = vec![0usize; n];
            idx[0] = i0;
            let mut x = vec![0.0; n];
            let mut hits = 0u64;
            loop {
                for (k, &i) in idx.iter().enumerate() {
                    x[k] = center(i);
                }
                if x.iter().map(|v| v * v).sum::<f64>() <= 1.0 && qf.eval(&x).abs() <= rho {
                    hits += 1;
                }
                // odometer over axes 1..n
                let mut k = n;
                loop {
                    if k == 1 {
                        return hits;
                    }
                    k -= 1;
                    idx[k] += 1;
                    if idx[k] < cells {
                        break;
                    }
                    idx[k] = 0;
                }
            }
        })
        .sum();
    Ok(SublevelEstimate { measure: count as f64 * h.powi(n as i32), cells_per_axis: cells, cell_width: h })
}

/// `sum |coefficients|` including the constant term.
pub fn coefficient_norm(q: &Poly) -> f64 {
    q.terms().map(|(_, c)| rational_to_f64(c).abs()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SublevelFit {
    pub n: usize,
    pub degree: u32,
    pub rho: f64,
    /// Largest `measure / (rho^{1/d} [[lambda]]^{-1/d})` on the fitting half.
    pub constant: f64,
    /// Same ratio on the held-out half.
    pub holdout_max: f64,
    /// Held-out ratios stay within twice the fitted constant.
    pub stable: bool,
}

/// Fits the constant of the sublevel bound on half of a seeded ensemble of
/// random degree-`d` forms in `n` variables and tests it on the other half.
pub fn sublevel_constant_fit(seed: u64, n: usize, d: u32, count: usize, rho: f64) -> Result<SublevelFit, OscError> {
    let mut rng = crate::lemmas::rng(seed);
    let mut ratios = Vec::with_capacity(count);
    for _ in 0..count {
        let q = loop {
            let q = crate::lemmas::random_form(&mut rng, n, d, 3, 0.6);
            if !q.is_zero() {
                break q;
            }
        };
        let norm = coefficient_norm(&q);
        let est = sublevel_measure(&q, rho)?;
        ratios.push(est.measure / (rho.powf(1.0 / d as f64) * norm.powf(-1.0 / d as f64)));
    }
    let half = count / 2;
    let constant = ratios[..half].iter().cloned().fold(0.0, f64::max);
    let holdout_max = ratios[half..].iter().cloned().fold(0.0, f64::max);
    Ok(SublevelFit { n, degree: d, rho, constant, holdout_max, stable: holdout_max <= 2.0 * constant })
}

// ---------------------------------------------------------------------------
// Kernel decay scan

/// Grid over `B_2 ∩ sector l`: midpoints of a `per_axis^n` lattice on
/// `[-2, 2]^n`, dropping points near `u = 0`, near `|u| = 2` and within
/// `0.01` of the sector boundary `|u_l|/|u| = c0`.
pub fn sector_grid(n: usize, l: usize, per_axis: usize, c0: f64) -> Vec<Vec<f64>> {
    let h = 4.0 / per_axis as f64;
    let mut out = Vec::new();
    let mut idx = vec![0usize; n];
    loop {
        let u: Vec<f64> = idx.iter().map(|&i| -2.0 + (i as f64 + 0.5) * h).collect();
        let r = norm(&u);
        if r > 0.05 && r < 1.98 && u[l].abs() / r >= c0 + 0.01 {
            out.push(u);
        }
        let mut k = n;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < per_axis {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Midpoints of `count` equal cells of `(-1, 1)`.
pub fn tau_grid(count: usize) -> Vec<f64> {
    (0..count).map(|i| -1.0 + (i as f64 + 0.5) * 2.0 / count as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelScanConfig {
    /// 1-based sector coordinate.
    pub l: usize,
    pub radii: Vec<f64>,
    pub u_grid: Vec<Vec<f64>>,
    pub tau_grid: Vec<f64>,
    /// `nu = nu_factor * r * nu_direction`; the direction has unit l1 norm.
    pub nu_direction: Vec<f64>,
    pub nu_factor: f64,
    /// Number of `mu` samples per radius; sample 0 is `mu = nu`.
    pub mu_samples: usize,
    pub bump: BumpSpec,
    pub tol: QuadTol,
    pub eps1: f64,
    pub eps2: f64,
    pub c0_override: Option<f64>,
    pub seed: u64,
}

impl KernelScanConfig {
    /// Standard grids and a seeded `nu` direction for a family.
    pub fn standard(
        f: &PhaseFamily,
        l: usize,
        radii: Vec<f64>,
        u_per_axis: usize,
        tau_count: usize,
        mu_samples: usize,
        seed: u64,
    ) -> Self {
        let n = f.n();
        let bump = BumpSpec::standard(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..f.len()).map(|_| rng.gen_range(0.5..1.0) * sign(&mut rng)).collect();
        let s = l1(&raw);
        KernelScanConfig {
            l,
            radii,
            u_grid: sector_grid(n, l.saturating_sub(1), u_per_axis, bump.c0),
            tau_grid: tau_grid(tau_count),
            nu_direction: raw.iter().map(|x| x / s).collect(),
            nu_factor: rng.gen_range(1.2..1.8),
            mu_samples,
            bump,
            tol: QuadTol::default(),
            eps1: 0.2,
            eps2: 0.6,
            c0_override: None,
            seed,
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), OscError> {
        let bad = |m: &str| Err(OscError::Config(m.into()));
        if !(2..=MAX_DIM).contains(&n) {
            return Err(OscError::Dimension(n));
        }
        if self.l == 0 || self.l > n {
            return bad("sector index out of range");
        }
        if self.radii.is_empty() || self.radii.iter().any(|&r| !(r >= 1.0)) {
            return bad("radii must be >= 1");
        }
        if self.radii.windows(2).any(|w| w[1] <= w[0]) {
            return bad("radii must be increasing");
        }
        if self.mu_samples == 0 {
            return bad("need at least one mu sample");
        }
        if !(1.0 < self.nu_factor && self.nu_factor < 2.0) {
            return bad("nu_factor must lie strictly between 1 and 2");
        }
        if (l1(&self.nu_direction) - 1.0).abs() > 1e-12 {
            return bad("nu_direction must have unit l1 norm");
        }
        if !(0.0 < self.eps1 && self.eps1 < self.eps2 && self.eps2 < 1.0) {
            return bad("need 0 < eps1 < eps2 < 1");
        }
        if self.u_grid.is_empty() || self.tau_grid.is_empty() {
            return bad("empty grid");
        }
        for u in &self.u_grid {
            if u.len() != n {
                return bad("grid point of wrong dimension");
            }
            let r = norm(u);
            if r == 0.0 || r >= 2.0 {
                return bad("grid must avoid u = 0 and stay inside B_2");
            }
            if (u[self.l - 1].abs() / r - self.bump.c0).abs() < 1e-9 {
                return bad("grid point on a sector boundary");
            }
        }
        if self.tau_grid.iter().any(|t| t.abs() >= 1.0) {
            return bad("tau grid must lie in (-1, 1)");
        }
        Ok(())
    }

    pub fn nu_at(&self, r: f64) -> Vec<f64> {
        self.nu_direction.iter().map(|d| d * self.nu_factor * r).collect()
    }
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// `mu` samples with `r <= |mu|_1 <= 2r`: sample 0 is `nu`, odd samples are
/// near-resonant perturbations of `nu`, even ones are uniform in the shell.
pub fn mu_samples(nu: &[f64], r: f64, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out = vec![nu.to_vec()];
    while out.len() < count {
        let mut mu: Vec<f64> = if out.len() % 2 == 1 {
            nu.iter().map(|x| x + r.sqrt() * rng.gen_range(-1.0..1.0)).collect()
        } else {
            nu.iter().map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let s = l1(&mu);
        let target = if out.len() % 2 == 1 { s.clamp(1.01 * r, 1.99 * r) } else { r * rng.gen_range(1.01..1.99) };
        if s == 0.0 {
            continue;
        }
        for x in &mut mu {
            *x *= target / s;
        }
        out.push(mu);
    }
    out
}

/// The certified polynomials `W` and `R^gamma` in floating point. Built
/// from the certificate alone; evaluation takes `nu` but no `mu`.
#[derive(Debug, Clone)]
pub struct CertifiedPolys {
    /// `(k, W_{j_k})` with `k` the position of `j` in `Lambda`.
    w_parts: Vec<(usize, F64Poly)>,
    r_gamma: CompiledHomo,
    det_bstar: CompiledHomo,
    nparams: usize,
}

impl CertifiedPolys {
    pub fn from_certificate(cert: &Certificate) -> Self {
        let w_parts = cert
            .lambda
            .iter()
            .enumerate()
            .filter_map(|(k, j)| cert.w.part(*j).map(|p| (k, p.to_f64())))
            .collect();
        CertifiedPolys {
            w_parts,
            r_gamma: cert.r_gamma.compile(),
            det_bstar: cert.det_bstar.compile(),
            nparams: 2 * cert.lambda.len(),
        }
    }

    /// `W_nu(u)`.
    pub fn w(&self, nu: &[f64], u: &[f64]) -> f64 {
        self.w_parts.iter().map(|(k, p)| nu[*k] * p.eval(u)).sum()
    }

    fn params(&self, nu: &[f64]) -> Vec<f64> {
        let mut p = nu.to_vec();
        p.resize(self.nparams, 0.0);
        p
    }

    /// `R^gamma_{nu,u}(tau)`.
    pub fn r(&self, nu: &[f64], u: &[f64], tau: f64) -> f64 {
        self.r_gamma.eval(u, tau, &self.params(nu))
    }

    pub fn det_bstar(&self, u: &[f64], tau: f64) -> f64 {
        self.det_bstar.eval(u, tau, &self.params(&[]))
    }
}

/// `eps1`, `eps2` and `C0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub eps1: f64,
    pub eps2: f64,
    pub c0: f64,
}

/// `G^nu = {u : |W_nu(u)| <= r^eps2}` and, for `u` outside `G^nu`,
/// `F_u^nu = {tau : |R^gamma_{nu,u}(tau)| <= C0 r^eps1}` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BadSets {
    pub in_g: Vec<bool>,
    pub in_f: Vec<Vec<bool>>,
}

impl BadSets {
    pub fn build(
        nu: &[f64],
        polys: &CertifiedPolys,
        u_grid: &[Vec<f64>],
        tau_grid: &[f64],
        r: f64,
        th: &Thresholds,
    ) -> Self {
        let g_thr = r.powf(th.eps2);
        let f_thr = th.c0 * r.powf(th.eps1);
        let in_g: Vec<bool> = u_grid.iter().map(|u| polys.w(nu, u).abs() <= g_thr).collect();
        let in_f = u_grid
            .iter()
            .zip(&in_g)
            .map(|(u, &g)| tau_grid.iter().map(|&t| !g && polys.r(nu, u, t).abs() <= f_thr).collect())
            .collect();
        BadSets { in_g, in_f }
    }

    /// One bit per `u` (in `G`) followed by one bit per `(u, tau)` (in `F_u`).
    pub fn bitmap(&self) -> Vec<u8> {
        let bits = self.in_g.iter().chain(self.in_f.iter().flatten());
        let mut out = Vec::new();
        for (i, b) in bits.enumerate() {
            if i % 8 == 0 {
                out.push(0u8);
            }
            if *b {
                *out.last_mut().unwrap() |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        hex_sha256(&self.bitmap())
    }

    pub fn g_fraction(&self) -> f64 {
        self.in_g.iter().filter(|b| **b).count() as f64 / self.in_g.len() as f64
    }

    /// Mean over `u` outside `G` of the fraction of `tau` in `F_u`.
    pub fn f_fraction(&self) -> f64 {
        let rows: Vec<&Vec<bool>> = self.in_f.iter().zip(&self.in_g).filter(|(_, g)| !**g).map(|(f, _)| f).collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|f| f.iter().filter(|b| **b).count() as f64 / f.len() as f64).sum::<f64>() / rows.len() as f64
    }

    /// Fraction of grid points `(u, tau)` with `u in G` or `tau in F_u`.
    pub fn bad_fraction(&self) -> f64 {
        let total: usize = self.in_f.iter().map(Vec::len).sum();
        let bad: usize =
            self.in_f.iter().zip(&self.in_g).map(|(f, g)| if *g { f.len() } else { f.iter().filter(|b| **b).count() }).sum();
        bad as f64 / total as f64
    }

    pub fn is_bad(&self, ui: usize, ti: usize) -> bool {
        self.in_g[ui] || self.in_f[ui][ti]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRow {
    pub r: f64,
    pub u: Vec<f64>,
    pub tau: f64,
    pub re: f64,
    pub im: f64,
    pub abs: f64,
    pub in_g: bool,
    pub in_f: bool,
    pub mu_sample_id: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusSummary {
    pub r: f64,
    pub nu: Vec<f64>,
    pub g_threshold: f64,
    pub f_threshold: f64,
    pub g_fraction: f64,
    pub f_fraction: f64,
    pub bad_fraction: f64,
    /// Max `|K_sharp|` over points outside both bad sets and over all `mu`.
    pub max_outside: Option<f64>,
    /// Same maximum restricted to the resonant sample `mu = nu`.
    pub max_outside_resonant: Option<f64>,
    pub max_all: f64,
    pub outside_points: usize,
    pub flagged: usize,
    pub trivial_bound_ok: bool,
    pub bitmap_digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanSummary {
    pub family_hash: String,
    pub l: usize,
    pub case: String,
    pub gamma: String,
    pub thresholds: Thresholds,
    pub c0_calibrated: bool,
    pub calibration_samples: usize,
    pub grid_points: usize,
    pub radii: Vec<RadiusSummary>,
    pub slope_outside: Option<f64>,
    pub slope_outside_resonant: Option<f64>,
    pub fractions_nonincreasing: bool,
    pub mu_independent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanReport {
    pub summary: ScanSummary,
    pub rows: Vec<ScanRow>,
}

impl ScanReport {
    /// CSV header: `r, u1..un, tau, re, im, abs, in_Gnu, in_Fu, mu_sample_id`.
    pub fn csv_header(n: usize) -> Vec<String> {
        let mut h = vec!["r".to_string()];
        h.extend((1..=n).map(|i| format!("u{i}")));
        h.extend(["tau", "re", "im", "abs", "in_Gnu", "in_Fu", "mu_sample_id"].map(String::from));
        h
    }

    pub fn csv_record(row: &ScanRow) -> Vec<String> {
        let mut v = vec![row.r.to_string()];
        v.extend(row.u.iter().map(f64::to_string));
        v.extend([row.tau, row.re, row.im, row.abs].map(|x| x.to_string()));
        v.push((row.in_g as u8).to_string());
        v.push((row.in_f as u8).to_string());
        v.push(row.mu_sample_id.to_string());
        v
    }
}

/// True when the sequence never increases.
pub fn nonincreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] <= w[0])
}

fn rational_nu(nu: &[f64]) -> Result<Vec<crate::polyring::Rational>, OscError> {
    nu.iter().map(|x| rational_from_f64(*x).ok_or_else(|| OscError::Config(format!("non-finite nu {x}")))).collect()
}

/// `C0 = 10 * median |det B* C[sigma^gamma] - R^gamma|` at the smallest
/// radius, over non-resonant `mu` samples whose `D*` coefficients are at
/// most `r^eps1`. Falls back to all non-resonant samples if none qualify,
/// and to `1` if the median vanishes.
fn calibrate_c0(
    cfg: &KernelScanConfig,
    f: &PhaseFamily,
    cert: &Certificate,
    cov: &ChangeOfVars,
    polys: &CertifiedPolys,
    mus: &[Vec<f64>],
) -> (f64, usize) {
    let exp = expand_phase_in_sigma_ungated(f, cov);
    let c_gamma = exp.total(&cert.gamma).compile();
    let c_dstar: Vec<CompiledHomo> = cert.dstar.rows().iter().map(|g: &MultiIndex| exp.total(g).compile()).collect();
    let r = cfg.radii[0];
    let nu = cfg.nu_at(r);
    let small = r.powf(cfg.eps1);
    let mut qualifying = Vec::new();
    let mut all = Vec::new();
    for mu in mus.iter().skip(1) {
        let mut params = nu.clone();
        params.extend_from_slice(mu);
        for u in &cfg.u_grid {
            for &t in &cfg.tau_grid {
                let rem = (polys.det_bstar(u, t) * c_gamma.eval(u, t, &params) - polys.r(&nu, u, t)).abs();
                all.push(rem);
                if c_dstar.iter().all(|c| c.eval(u, t, &params).abs() <= small) {
                    qualifying.push(rem);
                }
            }
        }
    }
    let pool = if qualifying.is_empty() { all } else { qualifying };
    let count = pool.len();
    let med = median(pool);
    (if med > 0.0 { 10.0 * med } else { 1.0 }, count)
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

/// Evaluates `K_sharp` over the grid for every radius and `mu` sample and
/// compares it with the bad sets built from the certificate.
pub fn kernel_decay_scan(cfg: &KernelScanConfig, f: &PhaseFamily, cert: &Certificate) -> Result<ScanReport, OscError> {
    let n = f.n();
    cfg.validate(n)?;
    if cert.family_hash != f.hash_hex() {
        return Err(OscError::CertMismatch("family hash differs".into()));
    }
    if cert.l != cfg.l {
        return Err(OscError::CertMismatch(format!("certificate sector {} but scan sector {}", cert.l, cfg.l)));
    }
    if cfg.nu_direction.len() != f.len() {
        return Err(OscError::Config("nu_direction length differs from |Lambda|".into()));
    }
    let cov = ChangeOfVars::new(f.q().clone(), cfg.l)?;
    let phases = PhaseSet::from_family(f);
    let polys = CertifiedPolys::from_certificate(cert);
    for &r in &cfg.radii {
        let sv = StoppingValue::new(
            rational_from_f64(r).ok_or_else(|| OscError::Config("bad radius".into()))?,
            rational_nu(&cfg.nu_at(r))?,
        );
        let (kind, m0) = classify_case(f, &sv).map_err(|e| OscError::CertMismatch(e.to_string()))?;
        if kind != cert.case.kind() || m0 != cert.m0 {
            return Err(OscError::CertMismatch(format!("nu at r = {r} falls in case {kind:?} with m0 = {m0}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d75_5f73_616d_706c);
    let all_mus: Vec<Vec<Vec<f64>>> =
        cfg.radii.iter().map(|&r| mu_samples(&cfg.nu_at(r), r, cfg.mu_samples, &mut rng)).collect();
    let (c0, calibrated, calibration_samples) = match cfg.c0_override {
        Some(c) => (c, false, 0),
        None => {
            let (c, k) = calibrate_c0(cfg, f, cert, &cov, &polys, &all_mus[0]);
            (c, true, k)
        }
    };
    let th = Thresholds { eps1: cfg.eps1, eps2: cfg.eps2, c0 };
    let bound = cfg.bump.sharp_trivial_bound(n);
    let points: Vec<(usize, usize)> =
        (0..cfg.u_grid.len()).flat_map(|i| (0..cfg.tau_grid.len()).map(move |k| (i, k))).collect();

    let mut rows = Vec::new();
    let mut radii = Vec::new();
    let mut mu_independent = true;
    for (ri, &r) in cfg.radii.iter().enumerate() {
        let nu = cfg.nu_at(r);
        let mut max_outside: Option<f64> = None;
        let mut max_outside_resonant: Option<f64> = None;
        let mut max_all: f64 = 0.0;
        let mut outside_points = 0;
        let mut flagged = 0;
        let mut trivial_ok = true;
        let mut digests = Vec::new();
        let mut first: Option<BadSets> = None;
        for (mi, mu) in all_mus[ri].iter().enumerate() {
            // rebuilt for every mu sample; the constructor never sees mu
            let sets = BadSets::build(&nu, &polys, &cfg.u_grid, &cfg.tau_grid, r, &th);
            digests.push(sets.digest());
            let vals: Vec<Result<QuadResult, OscError>> = points
                .par_iter()
                .map(|&(ui, ti)| eval_k_sharp(&phases, &nu, mu, &cfg.u_grid[ui], cfg.tau_grid[ti], &cov, &cfg.bump, &cfg.tol))
                .collect();
            for (&(ui, ti), v) in points.iter().zip(vals) {
                let (value, converged) = match v {
                    Ok(q) => (q.value, true),
                    Err(OscError::NonConvergence { .. }) => (Complex64::new(f64::NAN, f64::NAN), false),
                    Err(e) => return Err(e),
                };
                let a = value.norm();
                if converged {
                    max_all = max_all.max(a);
                    if a > bound * (1.0 + 1e-9) {
                        trivial_ok = false;
                    }
                    if !sets.is_bad(ui, ti) {
                        outside_points += 1;
                        max_outside = Some(max_outside.map_or(a, |m| m.max(a)));
                        if mi == 0 {
                            max_outside_resonant = Some(max_outside_resonant.map_or(a, |m| m.max(a)));
                        }
                    }
                } else {
                    flagged += 1;
                }
                rows.push(ScanRow {
                    r,
                    u: cfg.u_grid[ui].clone(),
                    tau: cfg.tau_grid[ti],
                    re: value.re,
                    im: value.im,
                    abs: a,
                    in_g: sets.in_g[ui],
                    in_f: sets.in_f[ui][ti],
                    mu_sample_id: mi,
                    converged,
                });
            }
            if first.is_none() {
                first = Some(sets);
            }
        }
        mu_independent &= digests.windows(2).all(|w| w[0] == w[1]);
        let sets = first.expect("at least one mu sample");
        radii.push(RadiusSummary {
            r,
            nu,
            g_threshold: r.powf(th.eps2),
            f_threshold: th.c0 * r.powf(th.eps1),
            g_fraction: sets.g_fraction(),
            f_fraction: sets.f_fraction(),
            bad_fraction: sets.bad_fraction(),
            max_outside,
            max_outside_resonant,
            max_all,
            outside_points,
            flagged,
            trivial_bound_ok: trivial_ok,
            bitmap_digests: digests,
        });
    }
    let slope_of = |pick: fn(&RadiusSummary) -> Option<f64>| {
        let (xs, ys): (Vec<f64>, Vec<f64>) =
            radii.iter().filter_map(|s| pick(s).filter(|m| *m > 0.0).map(|m| (s.r, m))).unzip();
        if xs.len() == radii.len() {
            loglog_slope(&xs, &ys)
        } else {
            None
        }
    };
    let slope_outside = slope_of(|s| s.max_outside);
    let slope_outside_resonant = slope_of(|s| s.max_outside_resonant);
    let fractions_nonincreasing = nonincreasing(&radii.iter().map(|s| s.g_fraction).collect::<Vec<_>>())
        && nonincreasing(&radii.iter().map(|s| s.f_fraction).collect::<Vec<_>>())
        && nonincreasing(&radii.iter().map(|s| s.bad_fraction).collect::<Vec<_>>());
    Ok(ScanReport {
        summary: ScanSummary {
            family_hash: cert.family_hash.clone(),
            l: cfg.l,
            case: format!("{:?}", cert.case),
            gamma: cert.gamma.to_string(),
            thresholds: th,
            c0_calibrated: calibrated,
            calibration_samples,
            grid_points: points.len(),
            radii,
            slope_outside,
            slope_outside_resonant,
            fractions_nonincreasing,
            mu_independent,
        },
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResonantPoint {
    pub r: f64,
    pub max_abs: f64,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResonantReport {
    pub points: Vec<ResonantPoint>,
    /// `min_r max|K| / max|K|` at the first radius.
    pub min_ratio: f64,
}

/// Max `|K_sharp|` over the grid along `mu = nu`, with no bad sets and no
/// admissibility gate. For `p2 = Q` this is the negative control.
pub fn resonant_scan(cfg: &KernelScanConfig, f: &PhaseFamily) -> Result<ResonantReport, OscError> {
    let n = f.n();
    cfg.validate(n)?;
    let cov = ChangeOfVars::new(f.q().clone(), cfg.l)?;
    let phases = PhaseSet::from_family(f);
    let pts: Vec<(&Vec<f64>, f64)> = cfg.u_grid.iter().flat_map(|u| cfg.tau_grid.iter().map(move |t| (u, *t))).collect();
    let mut points = Vec::new();
    for &r in &cfg.radii {
        let nu = cfg.nu_at(r);
        let vals: Vec<Option<f64>> = pts
            .par_iter()
            .map(|(u, t)| eval_k_sharp(&phases, &nu, &nu, u, *t, &cov, &cfg.bump, &cfg.tol).ok().map(|q| q.value.norm()))
            .collect();
        let flagged = vals.iter().filter(|v| v.is_none()).count();
        let max_abs = vals.into_iter().flatten().fold(0.0, f64::max);
        points.push(ResonantPoint { r, max_abs, flagged });
    }
    let first = points[0].max_abs;
    let min_ratio = points.iter().map(|p| p.max_abs / first).fold(f64::INFINITY, f64::min);
    Ok(ResonantReport { points, min_ratio })
}

/// Random shuffle helper kept deterministic for grids that are subsampled.
pub fn subsample<T: Clone>(xs: &[T], k: usize, seed: u64) -> Vec<T> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort_unstable();
    idx.into_iter().map(|i| xs[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyring::rat;
    use crate::quadform::QuadForm;
    use std::collections::BTreeMap;

    fn family(theta: &[i64], phases: &[(u32, &str)]) -> PhaseFamily {
        let q = QuadForm::from_i64(theta).unwrap();
        let n = theta.len();
        let map: BTreeMap<u32, Poly> = phases.iter().map(|(j, t)| (*j, Poly::parse(t, n).unwrap())).collect();
        PhaseFamily::new(q, map).unwrap()
    }

    #[test]
    fn gauss_legendre_is_exact_for_low_degree() {
        let (x, w) = gauss_legendre(16);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
        let m30: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(30)).sum();
        assert!((m30 - 2.0 / 31.0).abs() < 1e-13);
    }

    #[test]
    fn ball_volumes() {
        assert!((ball_volume(1, 2.0) - 4.0).abs() < 1e-12);
        assert!((ball_volume(2, 1.0) - std::f64::consts::PI).abs() < 1e-12);
        assert!((ball_volume(3, 1.0) - 4.0 * std::f64::consts::PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_frequencies_give_positive_real_kernel() {
        let f = family(&[1, -1], &[(2, "u1*u2")]);
        let cov = ChangeOfVars::new(f.q().clone(), 2).unwrap();
        let ph = PhaseSet::from_family(&f);
        let spec = BumpSpec::standard(2);
        let k = eval_k_sharp(&ph, &[0.0], &[0.0], &[0.3, 0.7], 0.2, &cov, &spec, &QuadTol::default()).unwrap();
        assert!(k.value.re > 0.0 && k.value.im.abs() < 1e-14);
        assert!(k.value.re <= spec.sharp_trivial_bound(2));
    }

    #[test]
    fn outside_sector_is_zero() {
        let f = family(&[1, -1], &[(2, "u1*u2")]);
        let cov = ChangeOfVars::new(f.q().clone(), 2).unwrap();
        let ph = PhaseSet::from_family(&f);
        let spec = BumpSpec::standard(2);
        // |u_2|/|u| = 0.1 < c0
        let k = eval_k_sharp(&ph, &[5.0], &[3.0], &[0.995, 0.0995], 0.1, &cov, &spec, &QuadTol::default()).unwrap();
        assert_eq!(k.value, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn bump_normalization() {
        let spec = BumpSpec::standard(3);
        assert!((spec.c1_sigma_bound() - 1.0).abs() < 1e-12);
        assert_eq!(BumpSpec::sector_of(&[0.5, -0.5, 0.2]), 0);
        assert_eq!(BumpSpec::sector_of(&[0.1, -0.5, 0.2]), 1);
    }

    #[test]
    fn sublevel_interval_cases() {
        let x = Poly::parse("u1", 1).unwrap();
        let m = sublevel_measure(&x, 0.1).unwrap().measure;
        assert!((m - 0.2).abs() < 1e-5);
        let lx = x.scale(&rat(50));
        let m = sublevel_measure(&lx, 0.1).unwrap().measure;
        assert!((m - 0.004).abs() < 1e-5);
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let xs = [1.0, 10.0, 100.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn bitmap_packing() {
        let s = BadSets { in_g: vec![true, false], in_f: vec![vec![false; 3], vec![true, false, true]] };
        assert_eq!(s.bitmap(), vec![0b1010_0001]);
        assert!((s.bad_fraction() - 5.0 / 6.0).abs() < 1e-12);
        assert!((s.f_fraction() - 2.0 / 3.0).abs() < 1e-12);
    }
}
