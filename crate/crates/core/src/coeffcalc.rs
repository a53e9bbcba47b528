//! The sigma-expansion of `P_nu(u+z) - P_mu(z)` after the sector change of
//! variables, split into the `B`, `D`, `E` pieces, and an independent oracle
//! that obtains the same coefficients by brute-force substitution.

use std::collections::BTreeMap;
use std::ops::Neg;

use num_bigint::BigInt;
use num_traits::{FromPrimitive, Num, One, Zero};

use crate::polyring::{rat, HomoElem, HomoLayout, MultiIndex, Poly, Rational};
use crate::quadform::{check_admissibility, PhaseFamily, QuadForm, Rejection};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoeffError {
    #[error("u must be nonzero")]
    ZeroVector,
    #[error("u_l must be nonzero for the forward change of variables")]
    ZeroDistinguished,
    #[error("distinguished coordinate {l} outside 1..{n}")]
    BadCoordinate { l: usize, n: usize },
    #[error("vector length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("inadmissible family: {0}")]
    Inadmissible(Rejection),
}

/// The sector change of variables `z -> (tau, sigma)` with distinguished
/// coordinate `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeOfVars {
    q: QuadForm,
    l: usize,
}

impl ChangeOfVars {
    /// `l` is 1-based.
    pub fn new(q: QuadForm, l: usize) -> Result<Self, CoeffError> {
        if l == 0 || l > q.n() {
            return Err(CoeffError::BadCoordinate { l, n: q.n() });
        }
        Ok(ChangeOfVars { q, l: l - 1 })
    }

    pub fn n(&self) -> usize {
        self.q.n()
    }

    pub fn q(&self) -> &QuadForm {
        &self.q
    }

    /// 0-based distinguished coordinate.
    pub fn l(&self) -> usize {
        self.l
    }

    pub fn theta(&self, i: usize) -> i8 {
        self.q.sign(i)
    }

    /// Position in `R^n` of the `m`-th sigma coordinate (both 0-based).
    pub fn m_of_l(&self, m: usize) -> usize {
        if m < self.l {
            m
        } else {
            m + 1
        }
    }

    /// `(alpha; v)`: `alpha` has `n - 1` entries, `v` goes to slot `l`.
    pub fn ins(&self, alpha: &MultiIndex, v: u32) -> MultiIndex {
        alpha.insert(self.l, v)
    }

    /// `gamma^m(1)`, the unit index with a 1 in sigma slot `m`.
    pub fn gamma_m1(&self, m: usize) -> MultiIndex {
        MultiIndex::unit(self.n() - 1, m)
    }

    /// `theta^alpha` as a rational.
    pub fn theta_pow(&self, alpha: &MultiIndex) -> Rational {
        rat(self.q.sign_pow(alpha))
    }
}

fn zfc<T>(u: &[T], tau: &T, sigma: &[T], norm: &T, cov: &ChangeOfVars) -> Vec<T>
where
    T: Num + Neg<Output = T> + Clone + FromPrimitive,
{
    let n = cov.n();
    let l = cov.l();
    let th = |i: usize| T::from_i8(cov.theta(i)).expect("sign");
    let mut z = vec![T::zero(); n];
    let mut zl = th(l) * u[l].clone() * tau.clone();
    for (m, s) in sigma.iter().enumerate() {
        let i = cov.m_of_l(m);
        z[i] = (tau.clone() * th(i) * u[i].clone() - th(l) * u[l].clone() * s.clone()) / norm.clone();
        zl = zl + th(i) * u[i].clone() * s.clone();
    }
    z[l] = zl / norm.clone();
    z
}

fn cfz<T>(u: &[T], z: &[T], norm: &T, cov: &ChangeOfVars) -> (T, Vec<T>)
where
    T: Num + Neg<Output = T> + Clone + FromPrimitive,
{
    let n = cov.n();
    let l = cov.l();
    let th = |i: usize| T::from_i8(cov.theta(i)).expect("sign");
    let mut dot = T::zero();
    for i in 0..n {
        dot = dot + th(i) * u[i].clone() * z[i].clone();
    }
    let tau = dot / norm.clone();
    let sigma = (0..n - 1)
        .map(|m| {
            let i = cov.m_of_l(m);
            (tau.clone() * th(i) * u[i].clone() - norm.clone() * z[i].clone()) / (th(l) * u[l].clone())
        })
        .collect();
    (tau, sigma)
}

fn check_lengths(n: usize, u: usize, sigma: usize) -> Result<(), CoeffError> {
    if u != n {
        return Err(CoeffError::Length { expected: n, got: u });
    }
    if sigma + 1 != n {
        return Err(CoeffError::Length { expected: n - 1, got: sigma });
    }
    Ok(())
}

/// `z` from `(u, tau, sigma)` in floating point.
pub fn z_from_coords(u: &[f64], tau: f64, sigma: &[f64], cov: &ChangeOfVars) -> Result<Vec<f64>, CoeffError> {
    check_lengths(cov.n(), u.len(), sigma.len())?;
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(CoeffError::ZeroVector);
    }
    Ok(zfc(u, &tau, sigma, &norm, cov))
}

/// Exact version; `norm` must be `|u|` (so `u` needs a rational length).
pub fn z_from_coords_exact(
    u: &[Rational],
    tau: &Rational,
    sigma: &[Rational],
    norm: &Rational,
    cov: &ChangeOfVars,
) -> Result<Vec<Rational>, CoeffError> {
    check_lengths(cov.n(), u.len(), sigma.len())?;
    let sq: Rational = u.iter().map(|x| x * x).fold(Rational::zero(), |a, b| a + b);
    if sq.is_zero() {
        return Err(CoeffError::ZeroVector);
    }
    assert!(&(norm * norm) == &sq && norm > &Rational::zero(), "norm is not |u|");
    Ok(zfc(u, tau, sigma, norm, cov))
}

/// `tau = <u, z>/|u|`, `sigma = (tau u~^(l) - |u| z^(l)) / (theta_l u_l)`.
pub fn coords_from_z(u: &[f64], z: &[f64], cov: &ChangeOfVars) -> Result<(f64, Vec<f64>), CoeffError> {
    check_lengths(cov.n(), u.len(), z.len().saturating_sub(1))?;
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(CoeffError::ZeroVector);
    }
    if u[cov.l()] == 0.0 {
        return Err(CoeffError::ZeroDistinguished);
    }
    Ok(cfz(u, z, &norm, cov))
}

pub fn coords_from_z_exact(
    u: &[Rational],
    z: &[Rational],
    norm: &Rational,
    cov: &ChangeOfVars,
) -> Result<(Rational, Vec<Rational>), CoeffError> {
    check_lengths(cov.n(), u.len(), z.len().saturating_sub(1))?;
    if u.iter().all(Zero::is_zero) {
        return Err(CoeffError::ZeroVector);
    }
    if u[cov.l()].is_zero() {
        return Err(CoeffError::ZeroDistinguished);
    }
    Ok(cfz(u, z, norm, cov))
}

fn inv_fact(alpha: &MultiIndex) -> Rational {
    Rational::new(BigInt::one(), alpha.factorial())
}

fn sign(k: u32) -> Rational {
    if k % 2 == 0 {
        Rational::one()
    } else {
        -Rational::one()
    }
}

/// `B_{j,gamma}(w) = sum_{alpha <= gamma} (-1)^|alpha| / (alpha! (gamma-alpha)!)
///   (d_{(alpha; |gamma-alpha|)} p_j)(w) w^{(gamma-alpha; |alpha|)}`.
/// `l` is the 0-based distinguished coordinate. No theta enters.
pub fn compute_b(p: &Poly, j: u32, gamma: &MultiIndex, l: usize) -> Poly {
    let n = p.nvars();
    let mut out = Poly::zero(n);
    if j < gamma.degree() {
        return out;
    }
    for alpha in gamma.below() {
        let rest = gamma.checked_sub(&alpha).expect("alpha <= gamma");
        let c = sign(alpha.degree()) * inv_fact(&alpha) * inv_fact(&rest);
        let d = p.derivative(&alpha.insert(l, rest.degree()));
        out = &out + &d.mul_monomial(&rest.insert(l, alpha.degree()), &c);
    }
    out
}

/// `D_{j,gamma}` as a polynomial in `u` (the `u~` factors expanded with theta).
pub fn compute_d(p: &Poly, j: u32, gamma: &MultiIndex, cov: &ChangeOfVars) -> Poly {
    let n = cov.n();
    let mut out = Poly::zero(n);
    let g = gamma.degree();
    if j <= g {
        return out;
    }
    for alpha in gamma.below() {
        let rest = gamma.checked_sub(&alpha).expect("alpha <= gamma");
        let base = sign(alpha.degree()) * inv_fact(&alpha) * inv_fact(&rest);
        let dorder = cov.ins(&alpha, rest.degree());
        let tail = cov.ins(&rest, alpha.degree());
        let tw = cov.theta_pow(&tail);
        for beta in MultiIndex::of_degree(n, j - g) {
            // A derivative of total order j of a degree-j form is the constant mu! c_mu.
            let mu = dorder.add(&beta);
            let c = p.coeff(&mu);
            if c.is_zero() {
                continue;
            }
            let val = c * Rational::from_integer(mu.factorial());
            out.add_term(beta.add(&tail), &base * &inv_fact(&beta) * &tw * val);
        }
    }
    out
}

/// `E_{j,gamma}(u, tau)`, a quotient-ring element in `layout`.
pub fn compute_e(p: &Poly, j: u32, gamma: &MultiIndex, cov: &ChangeOfVars, layout: HomoLayout) -> HomoElem {
    let n = cov.n();
    let g = gamma.degree();
    if j <= g + 1 {
        return HomoElem::zero(layout);
    }
    let theta = cov.q().theta();
    let top = j - 1; // common s-power: the b = 1 terms carry s^{-(j-1)}
    let mut body = Poly::zero(layout.nvars());
    for alpha in gamma.below() {
        let rest = gamma.checked_sub(&alpha).expect("alpha <= gamma");
        let base = sign(alpha.degree()) * inv_fact(&alpha) * inv_fact(&rest);
        let dorder = cov.ins(&alpha, rest.degree());
        let tail = cov.ins(&rest, alpha.degree());
        let tw = cov.theta_pow(&tail);
        for b in 1..(j - g) {
            for beta in MultiIndex::of_degree(n, b) {
                let dp = p.derivative(&dorder.add(&beta));
                if dp.is_zero() {
                    continue;
                }
                let dp = layout.lift_u(&dp.twist(theta));
                let mut mono = vec![0u32; layout.nvars()];
                for i in 0..n {
                    mono[i] = beta.get(i) + tail.get(i);
                }
                mono[layout.tau()] = j - g - b;
                // s^{-(j-b)} = s^{b-1} / s^{j-1}
                mono[layout.s()] = b - 1;
                let c = &base * &inv_fact(&beta) * &tw;
                body = &body + &dp.mul_monomial(&MultiIndex::new(mono), &c);
            }
        }
    }
    HomoElem::new(layout, body, top)
}

/// `|u|^2 Xi_{j,gamma^m(1)}` as a polynomial in `u`, from the defining sum
/// with `|beta| = j - 2`.
pub fn xi_norm_sq(p: &Poly, j: u32, m: usize, cov: &ChangeOfVars) -> Poly {
    let n = cov.n();
    let mut out = Poly::zero(n);
    if j < 2 {
        return out;
    }
    let gamma = cov.gamma_m1(m);
    let theta = cov.q().theta();
    for alpha in gamma.below() {
        let rest = gamma.checked_sub(&alpha).expect("alpha <= gamma");
        let base = sign(alpha.degree()) * inv_fact(&alpha) * inv_fact(&rest);
        let dorder = cov.ins(&alpha, rest.degree());
        let tail = cov.ins(&rest, alpha.degree());
        let tw = cov.theta_pow(&tail);
        for beta in MultiIndex::of_degree(n, j - 2) {
            let dp = p.derivative(&dorder.add(&beta));
            if dp.is_zero() {
                continue;
            }
            let c = &base * &inv_fact(&beta) * &tw;
            out = &out + &dp.twist(theta).mul_monomial(&beta.add(&tail), &c);
        }
    }
    out
}

/// `Xi_{j,gamma^m(1)} = xi_norm_sq / s^2` in `layout`.
pub fn compute_xi(p: &Poly, j: u32, m: usize, cov: &ChangeOfVars, layout: HomoLayout) -> HomoElem {
    HomoElem::new(layout, layout.lift_u(&xi_norm_sq(p, j, m, cov)), 2)
}

/// The two-sum form of `|u|^2 Xi`:
/// `sum_{|beta|=j-2} [theta_{m(l)} (d_{beta+e_l} p)(u~) u^{beta+e_{m(l)}}
///   - theta_l (d_{beta+e_{m(l)}} p)(u~) u^{beta+e_l}] / beta!`.
pub fn xi_two_sum(p: &Poly, j: u32, m: usize, cov: &ChangeOfVars) -> Poly {
    let n = cov.n();
    let mut out = Poly::zero(n);
    if j < 2 {
        return out;
    }
    let l = cov.l();
    let ml = cov.m_of_l(m);
    let theta = cov.q().theta();
    let (el, em) = (MultiIndex::unit(n, l), MultiIndex::unit(n, ml));
    for beta in MultiIndex::of_degree(n, j - 2) {
        let ib = inv_fact(&beta);
        let a = p.derivative(&beta.add(&el)).twist(theta);
        let b = p.derivative(&beta.add(&em)).twist(theta);
        out = &out + &a.mul_monomial(&beta.add(&em), &(&ib * rat(cov.theta(ml) as i64)));
        out = &out - &b.mul_monomial(&beta.add(&el), &(&ib * rat(cov.theta(l) as i64)));
    }
    out
}

/// The subcase-1 expression with `u` substituted for `u~`:
/// `sum_{|beta|=m0-2} theta^beta [u^{beta+e_{m(l)}} (d_{beta+e_l} p)(u)
///   - u^{beta+e_l} (d_{beta+e_{m(l)}} p)(u)] / beta!`.
pub fn subcase1_untwisted(p: &Poly, m0: u32, m: usize, cov: &ChangeOfVars) -> Poly {
    let n = cov.n();
    let mut out = Poly::zero(n);
    if m0 < 2 {
        return out;
    }
    let (el, em) = (MultiIndex::unit(n, cov.l()), MultiIndex::unit(n, cov.m_of_l(m)));
    for beta in MultiIndex::of_degree(n, m0 - 2) {
        let c = inv_fact(&beta) * cov.theta_pow(&beta);
        out = &out + &p.derivative(&beta.add(&el)).mul_monomial(&beta.add(&em), &c);
        out = &out - &p.derivative(&beta.add(&em)).mul_monomial(&beta.add(&el), &c);
    }
    out
}

/// Pieces of one sigma-coefficient. Every entry is `(j, value)` with the
/// value already carrying its tau and |u| factors; zero entries are omitted.
#[derive(Debug, Clone, Default)]
pub struct CoeffRecord {
    pub bpart: Vec<(u32, HomoElem)>,
    pub dpart: Vec<(u32, HomoElem)>,
    pub epart: Vec<(u32, HomoElem)>,
}

/// All sigma-coefficients `C[sigma^gamma]`, `1 <= |gamma| <= d`, with
/// `nu_k` as parameter `k` and `mu_k` as parameter `L + k`.
#[derive(Debug, Clone)]
pub struct SigmaExpansion {
    pub layout: HomoLayout,
    pub lambda: Vec<u32>,
    pub coeffs: BTreeMap<MultiIndex, CoeffRecord>,
}

impl SigmaExpansion {
    pub fn nu_param(&self, k: usize) -> Poly {
        self.layout.var(self.layout.param(k))
    }

    pub fn mu_param(&self, k: usize) -> Poly {
        self.layout.var(self.layout.param(self.lambda.len() + k))
    }

    fn pos(&self, j: u32) -> usize {
        self.lambda.iter().position(|&x| x == j).expect("j in Lambda")
    }

    /// `C[sigma^gamma]` with symbolic `nu`, `mu`.
    pub fn total(&self, gamma: &MultiIndex) -> HomoElem {
        let mut acc = HomoElem::zero(self.layout);
        let Some(rec) = self.coeffs.get(gamma) else { return acc };
        for (j, b) in &rec.bpart {
            let k = self.pos(*j);
            acc = &acc + &b.mul_poly(&(&self.nu_param(k) - &self.mu_param(k)));
        }
        for (j, x) in rec.dpart.iter().chain(&rec.epart) {
            acc = &acc + &x.mul_poly(&self.nu_param(self.pos(*j)));
        }
        acc
    }

    /// `C[sigma^gamma]` at numeric `nu`, `mu` (indexed by Lambda).
    pub fn total_at(&self, gamma: &MultiIndex, nu: &[Rational], mu: &[Rational]) -> HomoElem {
        let l = self.lambda.len();
        let mut e = self.total(gamma);
        for k in 0..l {
            e = e.subst_param(k, &nu[k]).subst_param(l + k, &mu[k]);
        }
        e
    }

    /// Structured text: a header, then one block per `gamma` listing the
    /// nonzero B, D and E parts by degree.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("lambda = {:?}\n", self.lambda));
        out.push_str(&format!("variables = {}\n", self.layout.names().join(", ")));
        for (k, j) in self.lambda.iter().enumerate() {
            out.push_str(&format!(
                "# nu_{j} = {}, mu_{j} = {}\n",
                self.layout.names()[self.layout.param(k)],
                self.layout.names()[self.layout.param(self.lambda.len() + k)]
            ));
        }
        for (gamma, rec) in &self.coeffs {
            out.push_str(&format!("\n[gamma {gamma}]\n"));
            for (tag, part) in [("B", &rec.bpart), ("D", &rec.dpart), ("E", &rec.epart)] {
                for (j, x) in part {
                    out.push_str(&format!("{tag}{j} = {}\n", x.to_text()));
                }
            }
        }
        out
    }

    pub fn gammas(&self) -> impl Iterator<Item = &MultiIndex> {
        self.coeffs.keys()
    }
}

/// Standard layout for a family: `u, tau, s, nu_1..nu_L, mu_1..mu_L`.
pub fn family_layout(f: &PhaseFamily) -> HomoLayout {
    HomoLayout::new(f.n(), 2 * f.len())
}

/// All `gamma` with `1 <= |gamma| <= d` in graded order.
pub fn gamma_set(n: usize, d: u32) -> Vec<MultiIndex> {
    MultiIndex::graded(n - 1, 1, d)
}

pub fn expand_phase_in_sigma(f: &PhaseFamily, cov: &ChangeOfVars) -> Result<SigmaExpansion, CoeffError> {
    check_admissibility(f).map_err(CoeffError::Inadmissible)?;
    Ok(expand_phase_in_sigma_ungated(f, cov))
}

/// Same as [`expand_phase_in_sigma`] without the admissibility gate.
pub fn expand_phase_in_sigma_ungated(f: &PhaseFamily, cov: &ChangeOfVars) -> SigmaExpansion {
    let layout = family_layout(f);
    let theta = cov.q().theta();
    let mut coeffs = BTreeMap::new();
    for gamma in gamma_set(f.n(), f.d()) {
        let g = gamma.degree();
        let mut rec = CoeffRecord::default();
        for (&j, p) in f.phases() {
            if j >= g {
                let b = compute_b(p, j, &gamma, cov.l());
                if !b.is_zero() {
                    let body = &layout.lift_u(&b.twist(theta)) * &layout.tau_pow(j - g);
                    rec.bpart.push((j, HomoElem::new(layout, body, j)));
                }
            }
            if j > g {
                let d = compute_d(p, j, &gamma, cov);
                if !d.is_zero() {
                    rec.dpart.push((j, HomoElem::new(layout, layout.lift_u(&d), g)));
                }
                let e = compute_e(p, j, &gamma, cov, layout);
                if !e.is_zero() {
                    rec.epart.push((j, e));
                }
            }
        }
        coeffs.insert(gamma, rec);
    }
    SigmaExpansion { layout, lambda: f.lambda(), coeffs }
}

/// Ground truth: substitutes the change of variables into
/// `P_nu(u+z) - P_mu(z)` and collects sigma-monomials. Keys are the nonzero
/// coefficients with `|gamma| >= 1`, values live in [`family_layout`].
pub fn oracle_direct_expansion(f: &PhaseFamily, cov: &ChangeOfVars) -> BTreeMap<MultiIndex, HomoElem> {
    let n = f.n();
    let nl = f.len();
    let std = family_layout(f);
    let big = HomoLayout::new(n, 2 * nl + n - 1);
    let l = cov.l();
    let th = |i: usize| rat(cov.theta(i) as i64);
    let u = |i: usize| big.var(i);
    let tau = big.var(big.tau());
    let s = big.var(big.s());
    let sigma = |m: usize| big.var(big.param(2 * nl + m));

    // z_i = num[i] / s
    let mut num = vec![Poly::zero(big.nvars()); n];
    let mut zl = (&u(l) * &tau).scale(&th(l));
    for m in 0..n - 1 {
        let i = cov.m_of_l(m);
        num[i] = &(&u(i) * &tau).scale(&th(i)) - &(&u(l) * &sigma(m)).scale(&th(l));
        zl = &zl + &(&u(i) * &sigma(m)).scale(&th(i));
    }
    num[l] = zl;
    let shifted: Vec<Poly> = (0..n).map(|i| &(&s * &u(i)) + &num[i]).collect();
    let as_homo = |v: &[Poly]| -> Vec<HomoElem> { v.iter().map(|b| HomoElem::new(big, b.clone(), 1)).collect() };
    let (shifted_h, num_h) = (as_homo(&shifted), as_homo(&num));

    let mut total = HomoElem::zero(big);
    for (k, (&j, p)) in f.phases().iter().enumerate() {
        let nu = big.var(big.param(k));
        let mu = big.var(big.param(nl + k));
        let (a, b) = if p.is_homogeneous(j) {
            (
                HomoElem::new(big, p.compose(&shifted), j),
                HomoElem::new(big, p.compose(&num), j),
            )
        } else {
            (
                crate::polyring::eval_at_homo(p, &shifted_h),
                crate::polyring::eval_at_homo(p, &num_h),
            )
        };
        total = &total + &(&a.mul_poly(&nu) - &b.mul_poly(&mu));
    }
    let sig_vars: Vec<usize> = (0..n - 1).map(|m| big.param(2 * nl + m)).collect();
    let mut out = BTreeMap::new();
    for (gamma, body) in total.body().split_by_vars(&sig_vars) {
        if gamma.degree() == 0 {
            continue;
        }
        let e = HomoElem::new(std, body.narrow(std.nvars()), total.spow());
        if !e.is_zero() {
            out.insert(gamma, e);
        }
    }
    out
}

/// Compares the decomposition to the oracle for every gamma; returns the
/// gammas that disagree.
pub fn expansion_mismatches(exp: &SigmaExpansion, oracle: &BTreeMap<MultiIndex, HomoElem>) -> Vec<MultiIndex> {
    let mut bad = Vec::new();
    for gamma in exp.gammas() {
        let want = oracle.get(gamma).cloned().unwrap_or_else(|| HomoElem::zero(exp.layout));
        if exp.total(gamma) != want {
            bad.push(gamma.clone());
        }
    }
    for gamma in oracle.keys() {
        if !exp.coeffs.contains_key(gamma) {
            bad.push(gamma.clone());
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadform::QuadForm;

    fn qf(t: &[i64]) -> QuadForm {
        QuadForm::from_i64(t).unwrap()
    }

    fn poly(s: &str, n: usize) -> Poly {
        Poly::parse(s, n).unwrap()
    }

    fn family(q: &QuadForm, ps: &[(u32, &str)]) -> PhaseFamily {
        PhaseFamily::new(q.clone(), ps.iter().map(|(j, s)| (*j, poly(s, q.n()))).collect()).unwrap()
    }

    #[test]
    fn z_at_zero_sigma_is_scaled_twist() {
        let cov = ChangeOfVars::new(qf(&[1, -1, 1]), 2).unwrap();
        let u = [1.0, 2.0, 2.0];
        let z = z_from_coords(&u, 0.5, &[0.0, 0.0], &cov).unwrap();
        let expect = [0.5 / 3.0, -1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in z.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(z_from_coords(&[0.0; 3], 0.1, &[0.0, 0.0], &cov), Err(CoeffError::ZeroVector));
    }

    #[test]
    fn b_examples() {
        // Q with l = 2, gamma = (2): theta_2 w1^2 + theta_1 w2^2
        for t in [[1, -1], [1, 1], [-1, 1]] {
            let q = qf(&t);
            let b = compute_b(&q.poly(), 2, &MultiIndex::new(vec![2]), 1);
            let want = Poly::from_terms(
                2,
                [(MultiIndex::new(vec![2, 0]), rat(t[1])), (MultiIndex::new(vec![0, 2]), rat(t[0]))],
            );
            assert_eq!(b, want);
        }
        // linear phase c1 y1 + c2 y2, l = 2: c2 w1 - c1 w2
        let b = compute_b(&poly("3 y1 + 5 y2", 2), 1, &MultiIndex::new(vec![1]), 1);
        assert_eq!(b, poly("5 w1 - 3 w2", 2));
        assert!(compute_b(&poly("y1^2", 2), 2, &MultiIndex::new(vec![3]), 1).is_zero());
    }

    #[test]
    fn d_examples() {
        for t2 in [1i64, -1] {
            let q = qf(&[1, t2]);
            let cov = ChangeOfVars::new(q, 2).unwrap();
            let d = compute_d(&poly("y1^2", 2), 2, &MultiIndex::new(vec![1]), &cov);
            assert_eq!(d, poly("u1*u2", 2).scale(&rat(-2 * t2)));
        }
        let q = qf(&[1, -1]);
        let cov = ChangeOfVars::new(q.clone(), 2).unwrap();
        assert!(compute_d(&q.power(2), 4, &MultiIndex::new(vec![1]), &cov).is_zero());
        assert!(compute_d(&Poly::zero(2), 3, &MultiIndex::new(vec![1]), &cov).is_zero());
    }

    #[test]
    fn e_has_tau_and_vanishes_at_small_order() {
        let q = qf(&[1, 1, -1]);
        let cov = ChangeOfVars::new(q, 3).unwrap();
        let layout = HomoLayout::new(3, 0);
        let p = poly("y1^3*y2 - 2 y2^2 y3^2 + y1 y3^3", 3);
        let g = MultiIndex::new(vec![1, 0]);
        let e = compute_e(&p, 4, &g, &cov, layout);
        assert!(!e.is_zero());
        assert!(e.min_tau_degree().unwrap() >= 1);
        assert!(compute_e(&p, 4, &MultiIndex::new(vec![2, 1]), &cov, layout).is_zero());
    }

    #[test]
    fn xi_forms_agree() {
        let q = qf(&[1, -1, 1]);
        let p = poly("y1^2 y2^2 + 3 y2^4 - y1^3 y3 + 2 y1 y2 y3^2", 3);
        for l in 1..=3 {
            let cov = ChangeOfVars::new(q.clone(), l).unwrap();
            for m in 0..2 {
                assert_eq!(xi_norm_sq(&p, 4, m, &cov), xi_two_sum(&p, 4, m, &cov));
            }
        }
    }

    #[test]
    fn quadratic_q_has_pure_b_part() {
        // p2 = Q, gamma = e_i + e_j (i != j): B-part equals (nu2-mu2) 2 theta_n u~_i u~_j / |u|^2
        let q = qf(&[1, -1, 1]);
        let f = family(&q, &[(2, "y1^2 - y2^2 + y3^2")]);
        let cov = ChangeOfVars::new(q.clone(), 3).unwrap();
        let exp = expand_phase_in_sigma_ungated(&f, &cov);
        let g = MultiIndex::new(vec![1, 1]);
        let rec = &exp.coeffs[&g];
        assert!(rec.dpart.is_empty() && rec.epart.is_empty());
        let l = exp.layout;
        let want = HomoElem::new(l, (&l.var(0) * &l.var(1)).scale(&rat(2 * q.sign(2) as i64 * -1)), 2);
        assert_eq!(rec.bpart[0].1, want);
        assert!(expand_phase_in_sigma(&f, &cov).is_err());
    }

    #[test]
    fn oracle_matches_small_case() {
        let q = qf(&[1, -1]);
        let f = family(&q, &[(2, "y1*y2")]);
        for l in 1..=2 {
            let cov = ChangeOfVars::new(q.clone(), l).unwrap();
            let exp = expand_phase_in_sigma(&f, &cov).unwrap();
            let oracle = oracle_direct_expansion(&f, &cov);
            assert!(expansion_mismatches(&exp, &oracle).is_empty());
        }
    }

    #[test]
    fn equal_nu_mu_kills_b_part() {
        let q = qf(&[1, 1]);
        let f = family(&q, &[(2, "y1*y2"), (3, "y1^3 - y2^3")]);
        let cov = ChangeOfVars::new(q, 1).unwrap();
        let exp = expand_phase_in_sigma(&f, &cov).unwrap();
        let nu = vec![rat(3), rat(-2)];
        for g in exp.gammas() {
            let with = exp.total_at(g, &nu, &nu);
            let rec = &exp.coeffs[g];
            let mut no_b = HomoElem::zero(exp.layout);
            for (j, x) in rec.dpart.iter().chain(&rec.epart) {
                no_b = &no_b + &x.scale(&nu[exp.pos(*j)]);
            }
            assert_eq!(with, no_b);
        }
    }
}
