//! Diagonal quadratic forms `Q(y) = sum theta_i y_i^2`, phase families and the
//! admissibility gate.

use std::collections::BTreeMap;

use num_traits::{One, Signed, Zero};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::polyring::{rat, rational_to_f64, rational_to_string, MultiIndex, Poly, Rational};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QuadFormError {
    #[error("theta entries must be +1 or -1, got {0}")]
    BadSign(i64),
    #[error("quadratic form needs at least one variable")]
    Empty,
    #[error("vector length {got} does not match dimension {n}")]
    LengthMismatch { n: usize, got: usize },
    #[error("polynomial is not homogeneous of degree {0}")]
    NotHomogeneous(u32),
    #[error("matrix is not square and symmetric")]
    NotSymmetric,
    #[error("matrix is singular")]
    Singular,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct QuadForm {
    theta: Vec<i8>,
}

impl QuadForm {
    pub fn new(theta: Vec<i8>) -> Result<Self, QuadFormError> {
        if theta.is_empty() {
            return Err(QuadFormError::Empty);
        }
        if let Some(&t) = theta.iter().find(|&&t| t != 1 && t != -1) {
            return Err(QuadFormError::BadSign(t as i64));
        }
        Ok(QuadForm { theta })
    }

    pub fn from_i64(theta: &[i64]) -> Result<Self, QuadFormError> {
        if let Some(&t) = theta.iter().find(|&&t| t != 1 && t != -1) {
            return Err(QuadFormError::BadSign(t));
        }
        Self::new(theta.iter().map(|&t| t as i8).collect())
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[i8] {
        &self.theta
    }

    pub fn sign(&self, i: usize) -> i8 {
        self.theta[i]
    }

    /// `(#plus, #minus)`
    pub fn signature(&self) -> (usize, usize) {
        let p = self.theta.iter().filter(|&&t| t > 0).count();
        (p, self.n() - p)
    }

    pub fn is_definite(&self) -> bool {
        self.theta.iter().all(|&t| t == self.theta[0])
    }

    pub fn poly(&self) -> Poly {
        let n = self.n();
        Poly::from_terms(n, (0..n).map(|i| (MultiIndex::scaled_unit(n, i, 2), rat(self.theta[i] as i64))))
    }

    /// `Q^k`
    pub fn power(&self, k: u32) -> Poly {
        self.poly().pow(k)
    }

    /// `u -> (theta_1 u_1, ..., theta_n u_n)`.
    pub fn twist(&self, u: &[Rational]) -> Result<Vec<Rational>, QuadFormError> {
        if u.len() != self.n() {
            return Err(QuadFormError::LengthMismatch { n: self.n(), got: u.len() });
        }
        Ok(u.iter().zip(&self.theta).map(|(x, &t)| if t < 0 { -x.clone() } else { x.clone() }).collect())
    }

    pub fn twist_f64(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.theta).map(|(x, &t)| x * t as f64).collect()
    }

    /// `theta^alpha = prod theta_i^{alpha_i}` as +1 or -1.
    pub fn sign_pow(&self, alpha: &MultiIndex) -> i64 {
        let odd_neg = alpha.iter().zip(&self.theta).filter(|(&a, &t)| t < 0 && a % 2 == 1).count();
        if odd_neg % 2 == 0 {
            1
        } else {
            -1
        }
    }
}

/// `|y|^{2k}` in `n` variables.
pub fn euclidean_power(n: usize, k: u32) -> Poly {
    QuadForm::new(vec![1; n]).expect("nonempty").power(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PhaseClass {
    Zero,
    Neither,
    QType,
    Parabolic,
    /// Both Q-type and parabolic (only when `Q = |y|^2`).
    Both,
}

impl PhaseClass {
    pub fn is_qtype(self) -> bool {
        matches!(self, PhaseClass::QType | PhaseClass::Both)
    }

    pub fn is_parabolic(self) -> bool {
        matches!(self, PhaseClass::Parabolic | PhaseClass::Both)
    }
}

/// If `p = C * base` for a nonzero rational `C`, returns `C`. `C` is recovered
/// from the lexicographically first term of `p`.
pub fn multiple_of(p: &Poly, base: &Poly) -> Option<Rational> {
    let (m, c) = p.terms().next()?;
    let b = base.coeff(m);
    if b.is_zero() {
        return None;
    }
    let ratio = c / &b;
    if &base.scale(&ratio) == p {
        Some(ratio)
    } else {
        None
    }
}

pub fn classify_phase(p: &Poly, j: u32, q: &QuadForm) -> Result<PhaseClass, QuadFormError> {
    if !p.is_homogeneous(j) {
        return Err(QuadFormError::NotHomogeneous(j));
    }
    if p.nvars() != q.n() {
        return Err(QuadFormError::LengthMismatch { n: q.n(), got: p.nvars() });
    }
    if p.is_zero() {
        return Ok(PhaseClass::Zero);
    }
    if j % 2 == 1 || j == 0 {
        return Ok(PhaseClass::Neither);
    }
    let k = j / 2;
    let qt = multiple_of(p, &q.power(k)).is_some();
    let par = multiple_of(p, &euclidean_power(q.n(), k)).is_some();
    Ok(match (qt, par) {
        (true, true) => PhaseClass::Both,
        (true, false) => PhaseClass::QType,
        (false, true) => PhaseClass::Parabolic,
        (false, false) => PhaseClass::Neither,
    })
}

/// Q-type in coordinate `i` relative to the distinguished coordinate `l`
/// (both 0-based): `theta_l d_{2e_l} = theta_i d_{2e_i}` and every cross
/// coefficient `d_{e_i+e_j}`, `j != i`, vanishes.
pub fn is_qtype_in_coordinate(p2: &Poly, i: usize, l: usize, q: &QuadForm) -> bool {
    let n = q.n();
    let d = |a: usize, b: usize| p2.coeff(&MultiIndex::unit(n, a).add(&MultiIndex::unit(n, b)));
    let lhs = d(l, l) * rat(q.sign(l) as i64);
    let rhs = d(i, i) * rat(q.sign(i) as i64);
    lhs == rhs && (0..n).filter(|&j| j != i).all(|j| d(i, j).is_zero())
}

/// Why a family is refused.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize)]
pub enum Rejection {
    #[error("family contains a nonzero linear phase")]
    LinearPhase,
    #[error("p2 = C*Q with C = {c}")]
    QuadraticIsQ { c: String },
    #[error("dimension n = {n} is below 2")]
    DimensionTooSmall { n: usize },
    #[error("phase of degree {degree} is not homogeneous of that degree")]
    NotHomogeneous { degree: u32 },
    #[error("family has no nonzero phase")]
    EmptyFamily,
}

impl Rejection {
    pub fn code(&self) -> &'static str {
        match self {
            Rejection::LinearPhase => "LinearPhase",
            Rejection::QuadraticIsQ { .. } => "QuadraticIsQ",
            Rejection::DimensionTooSmall { .. } => "DimensionTooSmall",
            Rejection::NotHomogeneous { .. } => "NotHomogeneous",
            Rejection::EmptyFamily => "EmptyFamily",
        }
    }
}

/// `(n, theta, {p_j})`. Zero phases are dropped on construction; nothing else
/// is validated here, see [`check_admissibility`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseFamily {
    q: QuadForm,
    phases: BTreeMap<u32, Poly>,
}

impl PhaseFamily {
    pub fn new(q: QuadForm, phases: BTreeMap<u32, Poly>) -> Result<Self, QuadFormError> {
        for p in phases.values() {
            if p.nvars() != q.n() {
                return Err(QuadFormError::LengthMismatch { n: q.n(), got: p.nvars() });
            }
        }
        let phases = phases.into_iter().filter(|(_, p)| !p.is_zero()).collect();
        Ok(PhaseFamily { q, phases })
    }

    pub fn n(&self) -> usize {
        self.q.n()
    }

    pub fn q(&self) -> &QuadForm {
        &self.q
    }

    /// Largest degree present (0 for an empty family).
    pub fn d(&self) -> u32 {
        self.phases.keys().next_back().copied().unwrap_or(0)
    }

    /// `Lambda`, increasing.
    pub fn lambda(&self) -> Vec<u32> {
        self.phases.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn phase(&self, j: u32) -> Option<&Poly> {
        self.phases.get(&j)
    }

    pub fn phases(&self) -> &BTreeMap<u32, Poly> {
        &self.phases
    }

    /// Position of `j` in `Lambda`.
    pub fn index_of(&self, j: u32) -> Option<usize> {
        self.phases.keys().position(|&k| k == j)
    }

    pub fn class_of(&self, j: u32) -> PhaseClass {
        match self.phases.get(&j) {
            None => PhaseClass::Zero,
            Some(p) => classify_phase(p, j, &self.q).unwrap_or(PhaseClass::Neither),
        }
    }

    pub fn canonical_text(&self) -> String {
        let mut s = format!("n={};theta={:?}", self.n(), self.q.theta());
        for (j, p) in &self.phases {
            s.push_str(&format!(";p{}={}", j, p.to_text()));
        }
        s
    }

    pub fn hash_hex(&self) -> String {
        hex_sha256(self.canonical_text().as_bytes())
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn check_admissibility(f: &PhaseFamily) -> Result<(), Rejection> {
    if f.n() < 2 {
        return Err(Rejection::DimensionTooSmall { n: f.n() });
    }
    for (&j, p) in f.phases() {
        if !p.is_homogeneous(j) {
            return Err(Rejection::NotHomogeneous { degree: j });
        }
        if j == 1 {
            return Err(Rejection::LinearPhase);
        }
        if j == 0 {
            return Err(Rejection::NotHomogeneous { degree: j });
        }
    }
    if f.is_empty() {
        return Err(Rejection::EmptyFamily);
    }
    if let Some(p2) = f.phase(2) {
        if let Some(c) = multiple_of(p2, &f.q().poly()) {
            return Err(Rejection::QuadraticIsQ { c: rational_to_string(&c) });
        }
    }
    Ok(())
}

/// `(r, nu)` with `nu` indexed by `Lambda`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoppingValue {
    pub r: Rational,
    pub nu: Vec<Rational>,
}

impl StoppingValue {
    pub fn new(r: Rational, nu: Vec<Rational>) -> Self {
        StoppingValue { r, nu }
    }

    /// `sum |nu_j|`
    pub fn norm(&self) -> Rational {
        self.nu.iter().map(|x| x.abs()).fold(Rational::zero(), |a, b| a + b)
    }

    /// `r <= |nu| <= 2r`
    pub fn in_range(&self) -> bool {
        let n = self.norm();
        self.r.is_positive() && n >= self.r && n <= &self.r * rat(2)
    }
}

#[derive(Debug, Clone)]
pub struct Normalization {
    pub form: QuadForm,
    /// `T` with `T^t A T = diag(a)`.
    pub transform: Vec<Vec<Rational>>,
    pub diagonal: Vec<Rational>,
    /// `sqrt|a_i|`, for floating-point use only.
    pub scales: Vec<f64>,
}

/// Lagrange congruence diagonalization over the rationals.
pub fn normalize_quadratic_form(a: &[Vec<Rational>]) -> Result<Normalization, QuadFormError> {
    let n = a.len();
    if n == 0 {
        return Err(QuadFormError::Empty);
    }
    if a.iter().any(|row| row.len() != n) {
        return Err(QuadFormError::NotSymmetric);
    }
    for i in 0..n {
        for j in 0..n {
            if a[i][j] != a[j][i] {
                return Err(QuadFormError::NotSymmetric);
            }
        }
    }
    let mut m: Vec<Vec<Rational>> = a.to_vec();
    let mut t: Vec<Vec<Rational>> =
        (0..n).map(|i| (0..n).map(|j| if i == j { Rational::one() } else { Rational::zero() }).collect()).collect();

    // Column op `col_dst += f * col_src` applied as a congruence.
    let add_col = |m: &mut Vec<Vec<Rational>>, t: &mut Vec<Vec<Rational>>, dst: usize, src: usize, f: &Rational| {
        for row in m.iter_mut() {
            let v = &row[src] * f;
            row[dst] += v;
        }
        let src_row = m[src].clone();
        for (c, v) in src_row.iter().enumerate() {
            m[dst][c] += v * f;
        }
        for row in t.iter_mut() {
            let v = &row[src] * f;
            row[dst] += v;
        }
    };
    let swap = |m: &mut Vec<Vec<Rational>>, t: &mut Vec<Vec<Rational>>, i: usize, j: usize| {
        m.swap(i, j);
        for row in m.iter_mut() {
            row.swap(i, j);
        }
        for row in t.iter_mut() {
            row.swap(i, j);
        }
    };

    for k in 0..n {
        if m[k][k].is_zero() {
            if let Some(j) = (k + 1..n).find(|&j| !m[j][j].is_zero()) {
                swap(&mut m, &mut t, k, j);
            } else if let Some(j) = (k + 1..n).find(|&j| !m[k][j].is_zero()) {
                add_col(&mut m, &mut t, k, j, &Rational::one());
            } else {
                return Err(QuadFormError::Singular);
            }
        }
        for j in k + 1..n {
            if m[k][j].is_zero() {
                continue;
            }
            let f = -(&m[k][j] / &m[k][k]);
            add_col(&mut m, &mut t, j, k, &f);
        }
    }
    let diagonal: Vec<Rational> = (0..n).map(|i| m[i][i].clone()).collect();
    let theta: Vec<i8> = diagonal.iter().map(|x| if x.is_positive() { 1 } else { -1 }).collect();
    let scales = diagonal.iter().map(|x| rational_to_f64(&x.abs()).sqrt()).collect();
    Ok(Normalization { form: QuadForm::new(theta)?, transform: t, diagonal, scales })
}

/// Exact square root of a nonnegative rational, if it is a perfect square.
pub fn rational_sqrt(x: &Rational) -> Option<Rational> {
    if x.is_negative() {
        return None;
    }
    let n = x.numer().sqrt();
    let d = x.denom().sqrt();
    if &(&n * &n) == x.numer() && &(&d * &d) == x.denom() {
        Some(Rational::new(n, d))
    } else {
        None
    }
}

/// Rewrites a polynomial in the coordinates `y = M y'`.
pub fn change_coordinates(p: &Poly, m: &[Vec<Rational>]) -> Poly {
    let n = p.nvars();
    let subs: Vec<Poly> = (0..n)
        .map(|i| Poly::from_terms(n, (0..n).map(|j| (MultiIndex::unit(n, j), m[i][j].clone()))))
        .collect();
    p.compose(&subs)
}

/// Matrix that takes normalized coordinates (where `Q = sum theta_i y_i^2`)
/// to the original ones, when every `|a_i|` is a rational square.
pub fn exact_normalizing_matrix(norm: &Normalization) -> Option<Vec<Vec<Rational>>> {
    let n = norm.diagonal.len();
    let roots: Option<Vec<Rational>> = norm.diagonal.iter().map(|a| rational_sqrt(&a.abs())).collect();
    let roots = roots?;
    Some(
        (0..n)
            .map(|i| (0..n).map(|j| &norm.transform[i][j] / &roots[j]).collect())
            .collect(),
    )
}

pub fn identity_matrix(n: usize) -> Vec<Vec<Rational>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { Rational::one() } else { Rational::zero() }).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qf(t: &[i64]) -> QuadForm {
        QuadForm::from_i64(t).unwrap()
    }

    fn poly(s: &str, n: usize) -> Poly {
        Poly::parse(s, n).unwrap()
    }

    #[test]
    fn twist_examples() {
        let q = qf(&[1, -1]);
        assert_eq!(q.twist(&[rat(3), rat(5)]).unwrap(), vec![rat(3), rat(-5)]);
        let u = vec![rat(2), rat(-7)];
        assert_eq!(q.twist(&q.twist(&u).unwrap()).unwrap(), u);
        assert_eq!(qf(&[1, 1]).twist(&u).unwrap(), u);
        assert!(q.twist(&[rat(1)]).is_err());
        assert!(QuadForm::from_i64(&[1, 2]).is_err());
    }

    #[test]
    fn classify_examples() {
        let q = qf(&[1, -1]);
        assert_eq!(classify_phase(&poly("y1^4 - 2 y1^2 y2^2 + y2^4", 2), 4, &q).unwrap(), PhaseClass::QType);
        assert_eq!(classify_phase(&poly("y1*y2", 2), 2, &q).unwrap(), PhaseClass::Neither);
        let e = qf(&[1, 1]);
        assert_eq!(classify_phase(&poly("3 y1^2 + 3 y2^2", 2), 2, &e).unwrap(), PhaseClass::Both);
        assert_eq!(classify_phase(&poly("y1^2 + y2^2", 2), 2, &q).unwrap(), PhaseClass::Parabolic);
        assert!(classify_phase(&poly("y1^2 + y1", 2), 2, &q).is_err());
        assert_eq!(classify_phase(&Poly::zero(2), 3, &q).unwrap(), PhaseClass::Zero);
    }

    #[test]
    fn admissibility_examples() {
        let q = qf(&[1, -1]);
        let fam = |ps: &[(u32, &str)], q: &QuadForm| {
            PhaseFamily::new(q.clone(), ps.iter().map(|(j, s)| (*j, poly(s, q.n()))).collect()).unwrap()
        };
        assert!(matches!(check_admissibility(&fam(&[(2, "y1^2 - y2^2")], &q)), Err(Rejection::QuadraticIsQ { .. })));
        assert_eq!(check_admissibility(&fam(&[(1, "y1"), (3, "y1^3")], &q)), Err(Rejection::LinearPhase));
        let q3 = qf(&[1, 1, -1]);
        assert!(check_admissibility(&fam(&[(2, "y1*y2"), (3, "y1^3")], &q3)).is_ok());
        assert_eq!(
            check_admissibility(&fam(&[(2, "y1^2")], &qf(&[1]))),
            Err(Rejection::DimensionTooSmall { n: 1 })
        );
        assert_eq!(check_admissibility(&fam(&[(3, "y1^2")], &q)), Err(Rejection::NotHomogeneous { degree: 3 }));
        assert_eq!(check_admissibility(&fam(&[], &q)), Err(Rejection::EmptyFamily));
    }

    #[test]
    fn qtype_in_coordinate_examples() {
        let q = qf(&[1, -1]);
        assert!(is_qtype_in_coordinate(&q.poly(), 0, 1, &q));
        assert!(!is_qtype_in_coordinate(&poly("y1*y2", 2), 0, 1, &q));
        let e = qf(&[1, 1, 1]);
        assert!(is_qtype_in_coordinate(&poly("y1^2 + y2^2 + 5 y3^2", 3), 0, 1, &e));
    }

    #[test]
    fn normalization_examples() {
        let r = |rows: &[&[i64]]| -> Vec<Vec<Rational>> { rows.iter().map(|row| row.iter().map(|&x| rat(x)).collect()).collect() };
        let id = normalize_quadratic_form(&r(&[&[1, 0], &[0, 1]])).unwrap();
        assert_eq!(id.form.theta(), &[1, 1]);
        assert_eq!(id.transform, identity_matrix(2));
        let d = normalize_quadratic_form(&r(&[&[4, 0], &[0, -9]])).unwrap();
        assert_eq!(d.form.theta(), &[1, -1]);
        assert_eq!(d.scales, vec![2.0, 3.0]);
        let h = normalize_quadratic_form(&r(&[&[0, 1], &[1, 0]])).unwrap();
        assert_eq!(h.form.signature(), (1, 1));
        assert!(normalize_quadratic_form(&r(&[&[1, 1], &[1, 1]])).is_err());
    }

    #[test]
    fn stopping_value_range() {
        let s = StoppingValue::new(rat(10), vec![rat(-6), rat(9)]);
        assert!(s.in_range());
        assert!(!StoppingValue::new(rat(10), vec![rat(3)]).in_range());
    }
}
