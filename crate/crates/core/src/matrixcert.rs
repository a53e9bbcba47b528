//! Matrices `B`, `D`, `E`, the distinguished row set, Cramer elimination,
//! `R^gamma`, the witness polynomial `W`, and the case analysis that ends in
//! a [`Certificate`].

use std::collections::{BTreeMap, BTreeSet};

use num_traits::{Signed, Zero};
use serde::Serialize;

use crate::coeffcalc::{
    compute_b, expand_phase_in_sigma_ungated, gamma_set, oracle_direct_expansion, ChangeOfVars, SigmaExpansion,
};
use crate::polyring::{rational_to_string, rat, HomoElem, HomoLayout, MultiIndex, Poly, Rational};
use crate::quadform::{check_admissibility, hex_sha256, is_qtype_in_coordinate, PhaseFamily, Rejection, StoppingValue};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CertError {
    #[error("rejected: {0}")]
    Rejected(Rejection),
    #[error("nu has {got} entries but Lambda has {expected}")]
    NuLength { expected: usize, got: usize },
    #[error("stopping value violates r <= |nu| <= 2r")]
    NormOutOfRange,
    #[error("no index j with |nu_j| >= r/L")]
    NoDominantIndex,
    #[error("p2 is Q-type in coordinates l and m(l) for every m: {trace:?}")]
    AllCoordinatesQType { trace: Vec<String> },
    #[error("gamma {0} belongs to D*")]
    GammaInDstar(MultiIndex),
    #[error("search failed: {0}")]
    SearchFailed(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CertError {
    /// Gate refusals as opposed to internal failures.
    pub fn is_rejection(&self) -> bool {
        matches!(self, CertError::Rejected(_) | CertError::NuLength { .. } | CertError::NormOutOfRange)
    }

    /// Stable reason code for diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            CertError::Rejected(r) => r.code(),
            CertError::NuLength { .. } => "NuLength",
            CertError::NormOutOfRange => "NormOutOfRange",
            CertError::NoDominantIndex => "NoDominantIndex",
            CertError::AllCoordinatesQType { .. } => "AllCoordinatesQType",
            CertError::GammaInDstar(_) => "GammaInDstar",
            CertError::SearchFailed(_) => "SearchFailed",
            CertError::Invariant(_) => "Invariant",
        }
    }
}

/// A matrix of quotient-ring entries with rows indexed by `gamma` and
/// columns by `j`.
#[derive(Debug, Clone)]
pub struct PolyMatrix {
    layout: HomoLayout,
    rows: Vec<MultiIndex>,
    cols: Vec<u32>,
    entries: Vec<Vec<HomoElem>>,
}

impl PolyMatrix {
    pub fn new(layout: HomoLayout, rows: Vec<MultiIndex>, cols: Vec<u32>, entries: Vec<Vec<HomoElem>>) -> Self {
        assert_eq!(entries.len(), rows.len());
        assert!(entries.iter().all(|r| r.len() == cols.len()));
        PolyMatrix { layout, rows, cols, entries }
    }

    pub fn layout(&self) -> HomoLayout {
        self.layout
    }

    pub fn rows(&self) -> &[MultiIndex] {
        &self.rows
    }

    pub fn cols(&self) -> &[u32] {
        &self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> &HomoElem {
        &self.entries[r][c]
    }

    pub fn row_index(&self, gamma: &MultiIndex) -> Option<usize> {
        self.rows.iter().position(|g| g == gamma)
    }

    pub fn col_index(&self, j: u32) -> Option<usize> {
        self.cols.iter().position(|&c| c == j)
    }

    pub fn entry(&self, gamma: &MultiIndex, j: u32) -> Option<&HomoElem> {
        Some(self.get(self.row_index(gamma)?, self.col_index(j)?))
    }

    pub fn select(&self, rows: &[MultiIndex], cols: &[u32]) -> PolyMatrix {
        let ri: Vec<usize> = rows.iter().map(|g| self.row_index(g).expect("row present")).collect();
        let ci: Vec<usize> = cols.iter().map(|&j| self.col_index(j).expect("column present")).collect();
        let entries = ri.iter().map(|&r| ci.iter().map(|&c| self.entries[r][c].clone()).collect()).collect();
        PolyMatrix::new(self.layout, rows.to_vec(), cols.to_vec(), entries)
    }

    pub fn replace_column(&self, c: usize, col: &[HomoElem]) -> PolyMatrix {
        let mut out = self.clone();
        for (r, v) in col.iter().enumerate() {
            out.entries[r][c] = v.clone();
        }
        out
    }

    /// Laplace expansion along the first row.
    pub fn determinant(&self) -> HomoElem {
        assert_eq!(self.rows.len(), self.cols.len(), "determinant of a non-square matrix");
        cofactor_det(&self.entries, self.layout)
    }

    /// Entries strictly below the diagonal vanish and diagonal entries do not.
    pub fn is_upper_triangular_nonsingular(&self) -> bool {
        let k = self.rows.len();
        (0..k).all(|r| (0..r).all(|c| self.entries[r][c].is_zero()) && !self.entries[r][r].is_zero())
    }

    pub fn diagonal_product(&self) -> HomoElem {
        (0..self.rows.len()).fold(HomoElem::one(self.layout), |acc, i| &acc * &self.entries[i][i])
    }
}

fn cofactor_det(m: &[Vec<HomoElem>], layout: HomoLayout) -> HomoElem {
    match m.len() {
        0 => HomoElem::one(layout),
        1 => m[0][0].clone(),
        k => {
            let mut acc = HomoElem::zero(layout);
            for c in 0..k {
                if m[0][c].is_zero() {
                    continue;
                }
                let minor: Vec<Vec<HomoElem>> = m[1..]
                    .iter()
                    .map(|row| row.iter().enumerate().filter(|(i, _)| *i != c).map(|(_, x)| x.clone()).collect())
                    .collect();
                let t = &m[0][c] * &cofactor_det(&minor, layout);
                acc = if c % 2 == 0 { &acc + &t } else { &acc - &t };
            }
            acc
        }
    }
}

/// `B`, `D`, `E` over all of the index set, columns `Lambda`.
#[derive(Debug, Clone)]
pub struct Matrices {
    pub b: PolyMatrix,
    pub d: PolyMatrix,
    pub e: PolyMatrix,
}

impl Matrices {
    pub fn layout(&self) -> HomoLayout {
        self.b.layout
    }

    pub fn lambda(&self) -> &[u32] {
        &self.b.cols
    }

    fn nu(&self, k: usize) -> Poly {
        self.layout().var(self.layout().param(k))
    }

    fn mu(&self, k: usize) -> Poly {
        self.layout().var(self.layout().param(self.lambda().len() + k))
    }

    /// `(D_gamma + E_gamma) nu` with symbolic nu.
    pub fn de_nu(&self, gamma: &MultiIndex) -> HomoElem {
        let r = self.b.row_index(gamma).expect("row present");
        let mut acc = HomoElem::zero(self.layout());
        for k in 0..self.lambda().len() {
            let de = &self.d.entries[r][k] + &self.e.entries[r][k];
            acc = &acc + &de.mul_poly(&self.nu(k));
        }
        acc
    }

    /// Row `gamma` of `B(nu - mu) + D nu + E nu`.
    pub fn c_row(&self, gamma: &MultiIndex) -> HomoElem {
        let r = self.b.row_index(gamma).expect("row present");
        let mut acc = self.de_nu(gamma);
        for k in 0..self.lambda().len() {
            acc = &acc + &self.b.entries[r][k].mul_poly(&(&self.nu(k) - &self.mu(k)));
        }
        acc
    }
}

pub fn build_matrices(f: &PhaseFamily, cov: &ChangeOfVars) -> Result<Matrices, CertError> {
    check_admissibility(f).map_err(CertError::Rejected)?;
    Ok(matrices_from_expansion(&expand_phase_in_sigma_ungated(f, cov)))
}

pub fn matrices_from_expansion(exp: &SigmaExpansion) -> Matrices {
    let layout = exp.layout;
    let rows: Vec<MultiIndex> = exp.gammas().cloned().collect();
    let cols = exp.lambda.clone();
    let mut b = Vec::new();
    let mut d = Vec::new();
    let mut e = Vec::new();
    let pick = |list: &Vec<(u32, HomoElem)>, j: u32| {
        list.iter().find(|(k, _)| *k == j).map(|(_, x)| x.clone()).unwrap_or_else(|| HomoElem::zero(layout))
    };
    for g in &rows {
        let rec = &exp.coeffs[g];
        b.push(cols.iter().map(|&j| pick(&rec.bpart, j)).collect());
        d.push(cols.iter().map(|&j| pick(&rec.dpart, j)).collect());
        e.push(cols.iter().map(|&j| pick(&rec.epart, j)).collect());
    }
    Matrices {
        b: PolyMatrix::new(layout, rows.clone(), cols.clone(), b),
        d: PolyMatrix::new(layout, rows.clone(), cols.clone(), d),
        e: PolyMatrix::new(layout, rows, cols, e),
    }
}

/// Rows of the matrix identity that disagree with the direct-substitution
/// oracle.
pub fn matrix_identity_mismatches(f: &PhaseFamily, cov: &ChangeOfVars, mats: &Matrices) -> Vec<MultiIndex> {
    let oracle = oracle_direct_expansion(f, cov);
    let mut bad = Vec::new();
    for g in mats.b.rows() {
        let want = oracle.get(g).cloned().unwrap_or_else(|| HomoElem::zero(mats.layout()));
        if mats.c_row(g) != want {
            bad.push(g.clone());
        }
    }
    bad.extend(oracle.keys().filter(|g| mats.b.row_index(g).is_none()).cloned());
    bad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum CaseKind {
    A,
    B1,
    B2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum CaseLabel {
    A,
    B1,
    B2Sub1,
    B2Sub2,
    B2Sub4,
}

impl CaseLabel {
    pub fn kind(self) -> CaseKind {
        match self {
            CaseLabel::A => CaseKind::A,
            CaseLabel::B1 => CaseKind::B1,
            _ => CaseKind::B2,
        }
    }
}

/// `D*`: one row per column, `j -> gamma(j)`. In case B2 (subcases 2, 4)
/// the entry for `j = 2` is the order-one index `gamma^m(1)`; in subcase 1
/// there is no entry for `j = 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistinguishedSet {
    pub case: CaseLabel,
    pub entries: BTreeMap<u32, MultiIndex>,
    pub m: Option<usize>,
}

impl DistinguishedSet {
    pub fn rows(&self) -> Vec<MultiIndex> {
        self.entries.values().cloned().collect()
    }

    pub fn cols(&self) -> Vec<u32> {
        self.entries.keys().copied().collect()
    }

    pub fn contains(&self, gamma: &MultiIndex) -> bool {
        self.entries.values().any(|g| g == gamma)
    }
}

/// Lexicographically smallest `gamma` with `|gamma| = j` and `B_{j,gamma}` nonzero.
pub fn smallest_gamma(p: &Poly, j: u32, cov: &ChangeOfVars) -> Option<MultiIndex> {
    let mut cands = MultiIndex::of_degree(cov.n() - 1, j);
    cands.sort();
    cands.into_iter().find(|g| !compute_b(p, j, g, cov.l()).is_zero())
}

pub fn choose_dstar(
    f: &PhaseFamily,
    case: CaseLabel,
    m: Option<usize>,
    cov: &ChangeOfVars,
) -> Result<DistinguishedSet, CertError> {
    let mut entries = BTreeMap::new();
    for (&j, p) in f.phases() {
        if j == 2 && case.kind() == CaseKind::B2 {
            if case != CaseLabel::B2Sub1 {
                let m = m.ok_or_else(|| CertError::Invariant("case B2 needs m".into()))?;
                entries.insert(2, cov.gamma_m1(m));
            }
            continue;
        }
        let g = smallest_gamma(p, j, cov)
            .ok_or_else(|| CertError::SearchFailed(format!("no gamma of order {j} with B nonzero")))?;
        entries.insert(j, g);
    }
    Ok(DistinguishedSet { case, entries, m })
}

/// `B*`, its determinant, and the Cramer determinants `det B^{*,j}`.
#[derive(Debug, Clone)]
pub struct Cramer {
    pub dstar: DistinguishedSet,
    pub bstar: PolyMatrix,
    pub det: HomoElem,
    pub det_j: BTreeMap<u32, HomoElem>,
}

/// The column `-(D* + E*) nu`.
fn rhs_column(ds: &DistinguishedSet, mats: &Matrices) -> Vec<HomoElem> {
    ds.rows().iter().map(|g| -mats.de_nu(g)).collect()
}

pub fn det_bstar(ds: &DistinguishedSet, mats: &Matrices) -> HomoElem {
    mats.b.select(&ds.rows(), &ds.cols()).determinant()
}

/// `B*` with column `j` replaced by `-(D* + E*) nu`, and its determinant.
pub fn build_bstar_j(ds: &DistinguishedSet, j: u32, mats: &Matrices) -> (PolyMatrix, HomoElem) {
    let bstar = mats.b.select(&ds.rows(), &ds.cols());
    let c = bstar.col_index(j).expect("j is a column of B*");
    let m = bstar.replace_column(c, &rhs_column(ds, mats));
    let det = m.determinant();
    (m, det)
}

pub fn cramer(ds: &DistinguishedSet, mats: &Matrices) -> Cramer {
    let bstar = mats.b.select(&ds.rows(), &ds.cols());
    let det = bstar.determinant();
    let det_j = ds.cols().into_iter().map(|j| (j, build_bstar_j(ds, j, mats).1)).collect();
    Cramer { dstar: ds.clone(), bstar, det, det_j }
}

impl Cramer {
    /// `sum_j B*_{gamma',j} det B^{*,j} == det B* (-(D*+E*) nu)_{gamma'}` for
    /// every row of `B*`.
    pub fn identity_holds(&self, mats: &Matrices) -> bool {
        let rhs = rhs_column(&self.dstar, mats);
        (0..self.bstar.rows().len()).all(|r| {
            let mut lhs = HomoElem::zero(mats.layout());
            for (c, j) in self.bstar.cols().iter().enumerate() {
                lhs = &lhs + &(self.bstar.get(r, c) * &self.det_j[j]);
            }
            lhs == &self.det * &rhs[r]
        })
    }
}

/// `R^gamma = sum_j B_{gamma,j} det B^{*,j} + det B* (D_gamma + E_gamma) nu`.
/// Columns of `B` outside `D*` must vanish in row `gamma`.
pub fn compute_r_gamma(cr: &Cramer, gamma: &MultiIndex, mats: &Matrices) -> Result<HomoElem, CertError> {
    if cr.dstar.contains(gamma) {
        return Err(CertError::GammaInDstar(gamma.clone()));
    }
    let mut acc = &cr.det * &mats.de_nu(gamma);
    for &j in mats.lambda() {
        let b = mats.b.entry(gamma, j).expect("entry");
        match cr.det_j.get(&j) {
            Some(dj) => acc = &acc + &(b * dj),
            None if b.is_zero() => {}
            None => {
                return Err(CertError::Invariant(format!("B[{gamma}, {j}] is nonzero but column {j} is not eliminated")))
            }
        }
    }
    Ok(acc)
}

/// `W` split by `nu`: `W_nu(u) = sum_j nu_j parts[j](u)`, over `|u|^{s1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WPoly {
    pub s1: u32,
    pub parts: BTreeMap<u32, Poly>,
}

impl WPoly {
    pub fn part(&self, j: u32) -> Option<&Poly> {
        self.parts.get(&j)
    }

    pub fn at(&self, lambda: &[u32], nu: &[Rational]) -> Poly {
        let n = self.parts.values().next().map(|p| p.nvars()).unwrap_or(0);
        let mut out = Poly::zero(n);
        for (k, j) in lambda.iter().enumerate() {
            if let Some(p) = self.parts.get(j) {
                out = &out + &p.scale(&nu[k]);
            }
        }
        out
    }
}

/// Coefficient of `tau^{d0}` written as `W(u, nu) / |u|^{s1}`.
pub fn extract_w(r: &HomoElem, d0: u32, s1: u32, lambda: &[u32]) -> Result<WPoly, CertError> {
    let layout = r.layout();
    let c = r.tau_coeff(d0).canonical();
    if c.is_zero() {
        return Err(CertError::Invariant(format!("coefficient of tau^{d0} vanishes identically")));
    }
    if c.spow() > s1 {
        return Err(CertError::Invariant(format!("denominator |u|^{} exceeds |u|^{s1}", c.spow())));
    }
    let body = c.with_spow(s1).body().clone();
    if body.degree_in(layout.s()).unwrap_or(0) > 0 || body.degree_in(layout.tau()).unwrap_or(0) > 0 {
        return Err(CertError::Invariant(format!("tau^{d0} coefficient is not a polynomial over |u|^{s1}")));
    }
    let mut parts = BTreeMap::new();
    let mut rebuilt = Poly::zero(layout.nvars());
    for (k, &j) in lambda.iter().enumerate() {
        let part = body.coeff_of_var(layout.param(k), 1);
        if part.is_zero() {
            continue;
        }
        if (0..layout.nparams).any(|q| part.degree_in(layout.param(q)).unwrap_or(0) > 0) {
            return Err(CertError::Invariant("W is not linear in nu".into()));
        }
        rebuilt = &rebuilt + &(&part * &layout.var(layout.param(k)));
        parts.insert(j, part.narrow(layout.n));
    }
    if rebuilt != body {
        return Err(CertError::Invariant("W has terms outside span{nu_j} (mu or constant)".into()));
    }
    Ok(WPoly { s1, parts })
}

/// Dominant index `m0` and the case. `|nu_j| >= r/L` counts as dominant; a
/// non-Q-type dominant index wins (case A), largest `|nu_j|` first.
pub fn classify_case(f: &PhaseFamily, sv: &StoppingValue) -> Result<(CaseKind, u32), CertError> {
    let lambda = f.lambda();
    if sv.nu.len() != lambda.len() {
        return Err(CertError::NuLength { expected: lambda.len(), got: sv.nu.len() });
    }
    if !sv.in_range() {
        return Err(CertError::NormOutOfRange);
    }
    let thresh = &sv.r / rat(lambda.len() as i64);
    let mut dom: Vec<(u32, Rational)> =
        lambda.iter().zip(&sv.nu).filter(|(_, v)| v.abs() >= thresh).map(|(&j, v)| (j, v.abs())).collect();
    if dom.is_empty() {
        return Err(CertError::NoDominantIndex);
    }
    // stable sort keeps the smaller j first on ties
    dom.sort_by(|a, b| b.1.cmp(&a.1));
    if let Some((j, _)) = dom.iter().find(|(j, _)| !f.class_of(*j).is_qtype()) {
        return Ok((CaseKind::A, *j));
    }
    let m0 = dom[0].0;
    if f.phase(2).is_none() {
        Ok((CaseKind::B1, m0))
    } else {
        Ok((CaseKind::B2, m0))
    }
}

/// Output of the case analysis: everything a certificate needs before the
/// numeric ν is plugged in.
#[derive(Debug, Clone)]
struct Found {
    cramer: Cramer,
    gamma: MultiIndex,
    d0: u32,
    w: WPoly,
    r: HomoElem,
}

fn try_gamma(
    cr: &Cramer,
    gamma: &MultiIndex,
    d0: u32,
    s1: u32,
    m0: u32,
    mats: &Matrices,
) -> Result<Option<Found>, CertError> {
    let r = compute_r_gamma(cr, gamma, mats)?;
    if r.tau_coeff(d0).is_zero() {
        return Ok(None);
    }
    let w = extract_w(&r, d0, s1, mats.lambda())?;
    if w.part(m0).is_none() {
        return Ok(None);
    }
    Ok(Some(Found { cramer: cr.clone(), gamma: gamma.clone(), d0, w, r }))
}

fn sorted_gammas(n: usize, k: u32) -> Vec<MultiIndex> {
    let mut v = MultiIndex::of_degree(n - 1, k);
    v.sort();
    v
}

fn search(cr: &Cramer, order: u32, d0: u32, s1: u32, m0: u32, mats: &Matrices, n: usize) -> Result<Option<Found>, CertError> {
    for g in sorted_gammas(n, order) {
        if cr.dstar.contains(&g) {
            continue;
        }
        if let Some(found) = try_gamma(cr, &g, d0, s1, m0, mats)? {
            return Ok(Some(found));
        }
    }
    Ok(None)
}

fn min_tau(e: &HomoElem) -> Result<u32, CertError> {
    e.min_tau_degree().ok_or_else(|| CertError::Invariant("det B* vanishes identically".into()))
}

/// Outcome of one coordinate `m` in case B2.
#[derive(Debug, Clone)]
enum B2Step {
    Certified(Box<Found>),
    QType,
    Failed,
}

/// Public view of [`B2Step`] for audits of a single coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum B2StepOutcome {
    Certified { case: CaseLabel, gamma: MultiIndex },
    QTypeInCoordinates,
    NoCertificate,
}

/// Runs the case-B2 step for one 0-based `m` and returns the outcome with
/// its trace line.
pub fn b2_step_outcome(f: &PhaseFamily, m0: u32, m: usize, cov: &ChangeOfVars) -> Result<(B2StepOutcome, Vec<String>), CertError> {
    let mats = matrices_from_expansion(&expand_phase_in_sigma_ungated(f, cov));
    let mut trace = Vec::new();
    let out = match b2_step(f, m0, m, cov, &mats, &mut trace)? {
        B2Step::Certified(found) => B2StepOutcome::Certified { case: found.cramer.dstar.case, gamma: found.gamma },
        B2Step::QType => B2StepOutcome::QTypeInCoordinates,
        B2Step::Failed => B2StepOutcome::NoCertificate,
    };
    Ok((out, trace))
}

/// Dispatch on `(B_{2,gamma^m(1)} == 0, theta_l == theta_{m(l)})`.
fn b2_step(
    f: &PhaseFamily,
    m0: u32,
    m: usize,
    cov: &ChangeOfVars,
    mats: &Matrices,
    trace: &mut Vec<String>,
) -> Result<B2Step, CertError> {
    let n = f.n();
    let l = cov.l();
    let p2 = f.phase(2).ok_or_else(|| CertError::Invariant("case B2 without p2".into()))?;
    let sum_all: u32 = f.lambda().iter().sum();
    let sum_hi: u32 = f.lambda().iter().filter(|&&j| j >= 3).sum();
    let ml = cov.m_of_l(m);
    let gm = cov.gamma_m1(m);
    let b2_zero = compute_b(p2, 2, &gm, l).is_zero();
    let same = cov.theta(l) == cov.theta(ml);
    let qtype_here = is_qtype_in_coordinate(p2, l, l, cov.q()) && is_qtype_in_coordinate(p2, ml, l, cov.q());
    let tag = format!("m={} (coordinate {})", m + 1, ml + 1);
    let step = match (b2_zero, same) {
        (true, false) => {
            let ds = choose_dstar(f, CaseLabel::B2Sub1, Some(m), cov)?;
            let cr = cramer(&ds, mats);
            if !mats.b.entry(&gm, 2).map(HomoElem::is_zero).unwrap_or(true) {
                return Err(CertError::Invariant("subcase 1 with B[gamma^m(1), 2] nonzero".into()));
            }
            let d0 = min_tau(&cr.det)? + 1;
            let r = compute_r_gamma(&cr, &gm, mats)?;
            let k0 = f.index_of(m0).expect("m0 in Lambda");
            if !r.tau_coeff(d0 - 1).param_coeff(k0, 1).is_zero() {
                return Err(CertError::Invariant("subcase 1: tau^0 part of R depends on nu_m0".into()));
            }
            match try_gamma(&cr, &gm, d0, 2 + sum_hi, m0, mats)? {
                Some(found) => {
                    trace.push(format!("{tag}: subcase 1 certifies with gamma = gamma^m(1), d0 = {d0}"));
                    B2Step::Certified(Box::new(found))
                }
                None => {
                    trace.push(format!("{tag}: subcase 1 but the nu_m0 part of W vanishes"));
                    B2Step::Failed
                }
            }
        }
        (false, true) => {
            let ds = choose_dstar(f, CaseLabel::B2Sub2, Some(m), cov)?;
            let cr = cramer(&ds, mats);
            check_b2_cramer(&cr)?;
            match search(&cr, 2, 1, 2 + sum_all, m0, mats, n)? {
                Some(found) => {
                    trace.push(format!("{tag}: subcase 2 certifies with gamma(2) = {}", found.gamma));
                    B2Step::Certified(Box::new(found))
                }
                None => {
                    trace.push(format!("{tag}: subcase 2 but no gamma(2) keeps the nu_m0 part"));
                    B2Step::Failed
                }
            }
        }
        (true, true) => {
            if !qtype_here {
                return Err(CertError::Invariant(format!(
                    "{tag}: B_2 vanishes with equal signs but p2 is not Q-type in coordinates {} and {}",
                    l + 1,
                    ml + 1
                )));
            }
            trace.push(format!("{tag}: subcase 3, p2 is Q-type in coordinates {} and {}", l + 1, ml + 1));
            B2Step::QType
        }
        (false, false) => {
            let ds = choose_dstar(f, CaseLabel::B2Sub4, Some(m), cov)?;
            let cr = cramer(&ds, mats);
            check_b2_cramer(&cr)?;
            let g2 = MultiIndex::scaled_unit(n - 1, m, 2);
            if let Some(found) = try_gamma(&cr, &g2, 1, 2 + sum_all, m0, mats)? {
                trace.push(format!("{tag}: subcase 4 certifies with gamma(2) = {g2}"));
                B2Step::Certified(Box::new(found))
            } else if qtype_here {
                trace.push(format!("{tag}: subcase 4, p2 is Q-type in coordinates {} and {}", l + 1, ml + 1));
                B2Step::QType
            } else {
                trace.push(format!("{tag}: subcase 4, gamma(2) = {g2} fails although p2 is not Q-type there"));
                match search(&cr, 2, 1, 2 + sum_all, m0, mats, n)? {
                    Some(found) => {
                        trace.push(format!("{tag}: fallback gamma(2) = {} certifies", found.gamma));
                        B2Step::Certified(Box::new(found))
                    }
                    None => B2Step::Failed,
                }
            }
        }
    };
    Ok(step)
}

/// Case B2: first `m` (in increasing order) that certifies.
fn run_case_b2(
    f: &PhaseFamily,
    m0: u32,
    cov: &ChangeOfVars,
    mats: &Matrices,
    trace: &mut Vec<String>,
) -> Result<Found, CertError> {
    let mut qtype_everywhere = true;
    for m in 0..f.n() - 1 {
        match b2_step(f, m0, m, cov, mats, trace)? {
            B2Step::Certified(found) => return Ok(*found),
            B2Step::QType => {}
            B2Step::Failed => qtype_everywhere = false,
        }
    }
    if qtype_everywhere {
        Err(CertError::AllCoordinatesQType { trace: trace.clone() })
    } else {
        Err(CertError::SearchFailed(format!("case B2 found no certificate: {trace:?}")))
    }
}

/// Subcases 2 and 4: `det B*` is linear in tau and every `det B^{*,j}`,
/// `j >= 3`, either vanishes or has no tau-free part.
fn check_b2_cramer(cr: &Cramer) -> Result<(), CertError> {
    if min_tau(&cr.det)? != 1 {
        return Err(CertError::Invariant("det B* does not have lowest tau-degree 1".into()));
    }
    for (j, d) in &cr.det_j {
        if *j >= 3 && !d.is_zero() && d.min_tau_degree() == Some(0) {
            return Err(CertError::Invariant(format!("det B^(*,{j}) has a tau-free part")));
        }
    }
    Ok(())
}

/// The certified hypotheses for one `(family, nu, l)`.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub family_hash: String,
    pub n: usize,
    pub theta: Vec<i8>,
    pub lambda: Vec<u32>,
    /// 1-based sector coordinate.
    pub l: usize,
    pub r: Rational,
    pub nu: Vec<Rational>,
    pub case: CaseLabel,
    pub m0: u32,
    pub dstar: DistinguishedSet,
    pub gamma: MultiIndex,
    pub d0: u32,
    pub w: WPoly,
    pub w_nu: Poly,
    pub s0: u32,
    pub witness: Vec<Rational>,
    pub w_at_witness: Rational,
    pub witness_m0: Vec<Rational>,
    pub det_bstar: HomoElem,
    pub r_gamma: HomoElem,
    pub w_norm: Rational,
    pub w_lower_bound: Rational,
    pub trace: Vec<String>,
}

pub fn certify(f: &PhaseFamily, sv: &StoppingValue, cov: &ChangeOfVars) -> Result<Certificate, CertError> {
    check_admissibility(f).map_err(CertError::Rejected)?;
    certify_ungated(f, sv, cov)
}

/// [`certify`] without the admissibility gate (for negative tests).
pub fn certify_ungated(f: &PhaseFamily, sv: &StoppingValue, cov: &ChangeOfVars) -> Result<Certificate, CertError> {
    let (kind, m0) = classify_case(f, sv)?;
    let mats = matrices_from_expansion(&expand_phase_in_sigma_ungated(f, cov));
    let n = f.n();
    let sum_all: u32 = f.lambda().iter().sum();
    let mut trace = Vec::new();
    let found = match kind {
        CaseKind::A | CaseKind::B1 => {
            let (label, order, s1) =
                if kind == CaseKind::A { (CaseLabel::A, 1, 1 + sum_all) } else { (CaseLabel::B1, 2, 2 + sum_all) };
            let ds = choose_dstar(f, label, None, cov)?;
            let cr = cramer(&ds, &mats);
            let d0 = min_tau(&cr.det)?;
            let found = search(&cr, order, d0, s1, m0, &mats, n)?.ok_or_else(|| {
                CertError::SearchFailed(format!("no gamma of order {order} keeps the nu_{m0} part of W"))
            })?;
            trace.push(format!("case {:?}: gamma = {}", label, found.gamma));
            found
        }
        CaseKind::B2 => run_case_b2(f, m0, cov, &mats, &mut trace)?,
    };
    finish(f, sv, cov, m0, found, trace)
}

fn finish(
    f: &PhaseFamily,
    sv: &StoppingValue,
    cov: &ChangeOfVars,
    m0: u32,
    found: Found,
    trace: Vec<String>,
) -> Result<Certificate, CertError> {
    let lambda = f.lambda();
    let k0 = f.index_of(m0).expect("m0 in Lambda");
    let w_m0 = found.w.part(m0).cloned().ok_or_else(|| CertError::Invariant("nu_m0 part of W vanishes".into()))?;
    let witness_m0 = w_m0
        .find_nonvanishing_witness()
        .ok_or_else(|| CertError::Invariant("no witness for the nu_m0 part of W".into()))?;
    let w_nu = found.w.at(&lambda, &sv.nu);
    let witness =
        w_nu.find_nonvanishing_witness().ok_or_else(|| CertError::Invariant("W_nu vanishes identically".into()))?;
    let w_at_witness = w_nu.eval(&witness);
    // Degree separation: the nu_j parts are homogeneous of pairwise distinct degrees.
    let mut degs = BTreeSet::new();
    for p in found.w.parts.values() {
        let d = p.total_degree().unwrap_or(0);
        if !p.is_homogeneous(d) || !degs.insert(d) {
            return Err(CertError::Invariant("nu_j parts of W are not degree separated".into()));
        }
    }
    let w_norm = w_nu.coeff_l1();
    let w_lower_bound = sv.nu[k0].abs() * w_m0.max_abs_coeff();
    if w_norm < w_lower_bound {
        return Err(CertError::Invariant("coefficient norm below the degree-separation bound".into()));
    }
    Ok(Certificate {
        family_hash: f.hash_hex(),
        n: f.n(),
        theta: f.q().theta().to_vec(),
        lambda,
        l: cov.l() + 1,
        r: sv.r.clone(),
        nu: sv.nu.clone(),
        case: found.cramer.dstar.case,
        m0,
        dstar: found.cramer.dstar.clone(),
        gamma: found.gamma,
        d0: found.d0,
        s0: w_nu.total_degree().unwrap_or(0),
        w: found.w,
        w_nu,
        witness,
        w_at_witness,
        witness_m0,
        det_bstar: found.cramer.det.clone(),
        r_gamma: found.r,
        w_norm,
        w_lower_bound,
        trace,
    })
}

/// Independent re-verification of a certificate from the family alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecheckReport {
    pub family_matches: bool,
    pub witness_nonzero: bool,
    pub d0_matches: bool,
    pub orders_ok: bool,
    pub gamma_outside_dstar: bool,
    pub triangular: bool,
    pub product_formula: bool,
    pub cramer_identity: bool,
    pub matrix_identity: bool,
    pub w_matches: bool,
    pub mu_free: bool,
}

impl RecheckReport {
    pub fn passed(&self) -> bool {
        self.family_matches
            && self.witness_nonzero
            && self.d0_matches
            && self.orders_ok
            && self.gamma_outside_dstar
            && self.triangular
            && self.product_formula
            && self.cramer_identity
            && self.matrix_identity
            && self.w_matches
            && self.mu_free
    }

    pub fn failures(&self) -> Vec<&'static str> {
        let checks = [
            ("family_matches", self.family_matches),
            ("witness_nonzero", self.witness_nonzero),
            ("d0_matches", self.d0_matches),
            ("orders_ok", self.orders_ok),
            ("gamma_outside_dstar", self.gamma_outside_dstar),
            ("triangular", self.triangular),
            ("product_formula", self.product_formula),
            ("cramer_identity", self.cramer_identity),
            ("matrix_identity", self.matrix_identity),
            ("w_matches", self.w_matches),
            ("mu_free", self.mu_free),
        ];
        checks.iter().filter(|(_, ok)| !ok).map(|(name, _)| *name).collect()
    }
}

impl Certificate {
    /// Rebuilds the expansion, matrices, `B*` and `W` from scratch and
    /// compares. Set `with_oracle` to also check the matrix identity
    /// against direct substitution.
    pub fn recheck(&self, f: &PhaseFamily, with_oracle: bool) -> RecheckReport {
        let cov = ChangeOfVars::new(f.q().clone(), self.l).expect("valid l");
        let exp = expand_phase_in_sigma_ungated(f, &cov);
        let mats = matrices_from_expansion(&exp);
        let ds = &self.dstar;
        let bstar = mats.b.select(&ds.rows(), &ds.cols());
        let det = bstar.determinant();
        let offset = u32::from(ds.case == CaseLabel::B2Sub1);
        let d0_matches = det.min_tau_degree().map(|d| d + offset) == Some(self.d0) && det == self.det_bstar;
        let orders_ok = ds.entries.iter().all(|(&j, g)| {
            let want = if j == 2 && matches!(ds.case, CaseLabel::B2Sub2 | CaseLabel::B2Sub4) { 1 } else { j };
            g.degree() == want
        }) && self.gamma.degree() == if ds.case == CaseLabel::A || ds.case == CaseLabel::B2Sub1 { 1 } else { 2 };
        let cr = cramer(ds, &mats);
        let w_matches = compute_r_gamma(&cr, &self.gamma, &mats)
            .and_then(|r| extract_w(&r, self.d0, self.w.s1, &self.lambda))
            .map(|w| w == self.w)
            .unwrap_or(false);
        let w_nu = self.w.at(&self.lambda, &self.nu);
        let witness_nonzero = w_nu == self.w_nu && !w_nu.eval(&self.witness).is_zero();
        let l = mats.layout();
        let mu_free = (0..self.lambda.len()).all(|k| self.r_gamma.body().degree_in(l.param(self.lambda.len() + k)).unwrap_or(0) == 0);
        let matrix_identity = if with_oracle {
            matrix_identity_mismatches(f, &cov, &mats).is_empty()
        } else {
            gamma_set(f.n(), f.d()).iter().all(|g| mats.c_row(g) == exp.total(g))
        };
        RecheckReport {
            family_matches: f.hash_hex() == self.family_hash,
            witness_nonzero,
            d0_matches,
            orders_ok,
            gamma_outside_dstar: !ds.contains(&self.gamma),
            triangular: bstar.is_upper_triangular_nonsingular(),
            product_formula: bstar.diagonal_product() == det,
            cramer_identity: cr.identity_holds(&mats),
            matrix_identity,
            w_matches,
            mu_free,
        }
    }

    pub fn to_doc(&self, recheck: Option<RecheckReport>) -> CertificateDoc {
        let rs = |v: &[Rational]| v.iter().map(rational_to_string).collect::<Vec<_>>();
        let mut doc = CertificateDoc {
            family_hash: self.family_hash.clone(),
            n: self.n,
            theta: self.theta.clone(),
            lambda: self.lambda.clone(),
            l: self.l,
            r: rational_to_string(&self.r),
            nu: rs(&self.nu),
            case: self.case,
            m0: self.m0,
            m: self.dstar.m.map(|m| m + 1),
            dstar: self.dstar.entries.iter().map(|(j, g)| (j.to_string(), g.to_string())).collect(),
            gamma: self.gamma.to_string(),
            d0: self.d0,
            s0: self.s0,
            s1: self.w.s1,
            w_parts: self.w.parts.iter().map(|(j, p)| (j.to_string(), p.to_text())).collect(),
            w_nu: self.w_nu.to_text(),
            witness: rs(&self.witness),
            w_at_witness: rational_to_string(&self.w_at_witness),
            witness_m0: rs(&self.witness_m0),
            det_bstar: self.det_bstar.to_text(),
            r_gamma_tau_degree: self.r_gamma.tau_degree().unwrap_or(0),
            w_norm: rational_to_string(&self.w_norm),
            w_lower_bound: rational_to_string(&self.w_lower_bound),
            r_over_l: rational_to_string(&(&self.r / rat(self.lambda.len() as i64))),
            trace: self.trace.clone(),
            recheck,
            digest: String::new(),
        };
        doc.digest = doc.compute_digest();
        doc
    }
}

/// Serializable form; `digest` is the SHA-256 of the document with an empty
/// digest field.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateDoc {
    pub family_hash: String,
    pub n: usize,
    pub theta: Vec<i8>,
    pub lambda: Vec<u32>,
    pub l: usize,
    pub r: String,
    pub nu: Vec<String>,
    pub case: CaseLabel,
    pub m0: u32,
    pub m: Option<usize>,
    pub dstar: BTreeMap<String, String>,
    pub gamma: String,
    pub d0: u32,
    pub s0: u32,
    pub s1: u32,
    pub w_parts: BTreeMap<String, String>,
    pub w_nu: String,
    pub witness: Vec<String>,
    pub w_at_witness: String,
    pub witness_m0: Vec<String>,
    pub det_bstar: String,
    pub r_gamma_tau_degree: u32,
    pub w_norm: String,
    pub w_lower_bound: String,
    pub r_over_l: String,
    pub trace: Vec<String>,
    pub recheck: Option<RecheckReport>,
    pub digest: String,
}

impl CertificateDoc {
    pub fn compute_digest(&self) -> String {
        let mut c = self.clone();
        c.digest.clear();
        hex_sha256(serde_json::to_string(&c).expect("serializable").as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadform::QuadForm;

    fn family(t: &[i64], ps: &[(u32, &str)]) -> PhaseFamily {
        let q = QuadForm::from_i64(t).unwrap();
        let n = q.n();
        PhaseFamily::new(q, ps.iter().map(|(j, s)| (*j, Poly::parse(s, n).unwrap())).collect()).unwrap()
    }

    fn sv(r: i64, nu: &[i64]) -> StoppingValue {
        StoppingValue::new(rat(r), nu.iter().map(|&x| rat(x)).collect())
    }

    #[test]
    fn cofactor_matches_hand_2x2() {
        let l = HomoLayout::new(2, 0);
        let x = |i| HomoElem::from_poly(l, l.var(i));
        let m = PolyMatrix::new(
            l,
            vec![MultiIndex::new(vec![1]), MultiIndex::new(vec![2])],
            vec![2, 3],
            vec![vec![x(0), x(1)], vec![x(2), x(3)]],
        );
        let want = &(&x(0) * &x(3)) - &(&x(1) * &x(2));
        assert_eq!(m.determinant(), want);
    }

    #[test]
    fn case_a_single_phase() {
        let f = family(&[1, -1], &[(2, "y1*y2")]);
        let cov = ChangeOfVars::new(f.q().clone(), 2).unwrap();
        let cert = certify(&f, &sv(10, &[10]), &cov).unwrap();
        assert_eq!(cert.case, CaseLabel::A);
        assert_eq!(cert.d0, 0);
        assert_eq!(cert.gamma.degree(), 1);
        assert_eq!(cert.w.s1, 3);
        let rep = cert.recheck(&f, true);
        assert!(rep.passed(), "{:?}", rep.failures());
    }

    #[test]
    fn case_b1_quartic() {
        let f = family(&[1, -1], &[(4, "y1^4 - 2 y1^2 y2^2 + y2^4")]);
        let cov = ChangeOfVars::new(f.q().clone(), 2).unwrap();
        let cert = certify(&f, &sv(5, &[7]), &cov).unwrap();
        assert_eq!(cert.case, CaseLabel::B1);
        assert_eq!((cert.d0, cert.gamma.degree(), cert.w.s1), (0, 2, 6));
        let rep = cert.recheck(&f, true);
        assert!(rep.passed(), "{:?}", rep.failures());
    }

    #[test]
    fn classify_examples() {
        let f = family(&[1, 1], &[(2, "y1*y2"), (4, "y1^4 + 2 y1^2 y2^2 + y2^4")]);
        assert_eq!(classify_case(&f, &sv(10, &[10, 1])).unwrap(), (CaseKind::A, 2));
        assert_eq!(classify_case(&f, &sv(10, &[1, 10])).unwrap().0, CaseKind::B2);
        assert_eq!(classify_case(&f, &sv(10, &[1, 1])), Err(CertError::NormOutOfRange));
    }

    #[test]
    fn q_quadratic_ungated_is_all_qtype() {
        let f = family(&[1, -1], &[(2, "y1^2 - y2^2"), (4, "y1^4 - 2 y1^2 y2^2 + y2^4")]);
        let cov = ChangeOfVars::new(f.q().clone(), 2).unwrap();
        assert!(matches!(certify(&f, &sv(10, &[0, 10]), &cov), Err(CertError::Rejected(_))));
        assert!(matches!(
            certify_ungated(&f, &sv(10, &[0, 10]), &cov),
            Err(CertError::AllCoordinatesQType { .. })
        ));
    }

    #[test]
    fn case_b2_examples() {
        let cases: [(&[i64], &[(u32, &str)], usize, CaseLabel); 4] = [
            (&[1, 1], &[(2, "y1*y2"), (4, "y1^4 + 2 y1^2 y2^2 + y2^4")], 2, CaseLabel::B2Sub2),
            (&[1, -1], &[(2, "y1^2 + y2^2"), (4, "y1^4 - 2 y1^2 y2^2 + y2^4")], 2, CaseLabel::B2Sub1),
            (&[1, -1], &[(2, "y1*y2"), (4, "y1^4 - 2 y1^2 y2^2 + y2^4")], 2, CaseLabel::B2Sub4),
            (&[1, 1, -1], &[(2, "y1*y3 + y2^2"), (3, "y1^3"), (4, "(y1^2 + y2^2 - y3^2)^2")], 3, CaseLabel::B2Sub4),
        ];
        for (t, ps, l, want) in cases {
            let f = family(t, ps);
            let cov = ChangeOfVars::new(f.q().clone(), l).unwrap();
            let mut nu = vec![0; f.len()];
            *nu.last_mut().unwrap() = 10;
            let cert = certify(&f, &sv(10, &nu), &cov).unwrap();
            assert_eq!(cert.case, want, "{:?}", cert.trace);
            let rep = cert.recheck(&f, true);
            assert!(rep.passed(), "{:?}", rep.failures());
        }
    }
}
