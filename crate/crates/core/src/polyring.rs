//! Sparse multivariate polynomials over the rationals, plus the quotient ring
//! `Q[u, tau, s, params] / (s^2 - |u|^2)` in which `s` stands for `|u|`.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

pub type Rational = BigRational;

pub fn rat(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

pub fn rat_frac(n: i64, d: i64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

/// Parses `"3"`, `"-1/2"`, `"0.25"`.
pub fn parse_rational(s: &str) -> Result<Rational, PolyError> {
    let t = s.trim();
    let bad = || PolyError::Parse { col: 0, msg: format!("not a rational number: {t:?}") };
    if let Some((a, b)) = t.split_once('/') {
        let a: BigInt = a.trim().parse().map_err(|_| bad())?;
        let b: BigInt = b.trim().parse().map_err(|_| bad())?;
        if b.is_zero() {
            return Err(bad());
        }
        return Ok(Rational::new(a, b));
    }
    if let Some((ip, fp)) = t.split_once('.') {
        if fp.is_empty() || !fp.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let neg = ip.trim_start().starts_with('-');
        let ip_abs = ip.trim().trim_start_matches(['-', '+']);
        let whole: BigInt = if ip_abs.is_empty() { BigInt::zero() } else { ip_abs.parse().map_err(|_| bad())? };
        let frac: BigInt = fp.parse().map_err(|_| bad())?;
        let den = num_traits::pow(BigInt::from(10), fp.len());
        let v = Rational::new(whole * &den + frac, den);
        return Ok(if neg { -v } else { v });
    }
    let a: BigInt = t.parse().map_err(|_| bad())?;
    Ok(Rational::from_integer(a))
}

pub fn rational_to_string(q: &Rational) -> String {
    if q.is_integer() {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

pub fn rational_to_f64(q: &Rational) -> f64 {
    q.to_f64().unwrap_or_else(|| {
        let n = q.numer().to_f64().unwrap_or(f64::NAN);
        let d = q.denom().to_f64().unwrap_or(f64::NAN);
        n / d
    })
}

/// Exact conversion of a finite double to a rational.
pub fn rational_from_f64(x: f64) -> Option<Rational> {
    Rational::from_float(x)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolyError {
    #[error("variable count mismatch: {0} vs {1}")]
    VarCountMismatch(usize, usize),
    #[error("parse error at column {col}: {msg}")]
    Parse { col: usize, msg: String },
}

/// Exponent vector. Ordered lexicographically as a vector.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Default, Serialize, Deserialize)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(exps: Vec<u32>) -> Self {
        MultiIndex(exps)
    }

    pub fn zeros(n: usize) -> Self {
        MultiIndex(vec![0; n])
    }

    pub fn unit(n: usize, i: usize) -> Self {
        Self::scaled_unit(n, i, 1)
    }

    pub fn scaled_unit(n: usize, i: usize, k: u32) -> Self {
        let mut v = vec![0; n];
        v[i] = k;
        MultiIndex(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn get(&self, i: usize) -> u32 {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, v: u32) {
        self.0[i] = v;
    }

    /// `|alpha|`
    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Entrywise `self <= other`.
    pub fn le(&self, other: &MultiIndex) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        assert_eq!(self.len(), other.len(), "multi-index length mismatch");
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn checked_sub(&self, other: &MultiIndex) -> Option<MultiIndex> {
        if !other.le(self) {
            return None;
        }
        Some(MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    /// `alpha! = prod alpha_i!`
    pub fn factorial(&self) -> BigInt {
        let mut f = BigInt::one();
        for &a in &self.0 {
            for k in 2..=a {
                f *= k;
            }
        }
        f
    }

    /// All `beta <= self`, in descending lexicographic order.
    pub fn below(&self) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        let mut cur = vec![0u32; self.len()];
        fn rec(bound: &[u32], i: usize, cur: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
            if i == bound.len() {
                out.push(MultiIndex(cur.clone()));
                return;
            }
            for v in (0..=bound[i]).rev() {
                cur[i] = v;
                rec(bound, i + 1, cur, out);
            }
        }
        rec(&self.0, 0, &mut cur, &mut out);
        out
    }

    /// All indices of length `n` with `|alpha| = k`, in descending lexicographic
    /// order (so `e_1` precedes `e_2`).
    pub fn of_degree(n: usize, k: u32) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        if n == 0 {
            if k == 0 {
                out.push(MultiIndex(Vec::new()));
            }
            return out;
        }
        let mut cur = vec![0u32; n];
        fn rec(n: usize, i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
            if i == n - 1 {
                cur[i] = left;
                out.push(MultiIndex(cur.clone()));
                return;
            }
            for v in (0..=left).rev() {
                cur[i] = v;
                rec(n, i + 1, left - v, cur, out);
            }
        }
        rec(n, 0, k, &mut cur, &mut out);
        out
    }

    /// Graded order: all degree `lo` indices, then degree `lo + 1`, ...
    pub fn graded(n: usize, lo: u32, hi: u32) -> Vec<MultiIndex> {
        (lo..=hi).flat_map(|k| Self::of_degree(n, k)).collect()
    }

    /// The `(alpha; v)` convention: insert `v` at position `l`, shifting later
    /// entries right. `l` is 0-based.
    pub fn insert(&self, l: usize, v: u32) -> MultiIndex {
        let mut e = self.0.clone();
        e.insert(l, v);
        MultiIndex(e)
    }

    /// Drops position `l`.
    pub fn remove(&self, l: usize) -> MultiIndex {
        let mut e = self.0.clone();
        e.remove(l);
        MultiIndex(e)
    }

    pub fn iter(&self) -> impl Iterator<Item = &u32> {
        self.0.iter()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

impl std::str::FromStr for MultiIndex {
    type Err = PolyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let inner = t
            .strip_prefix('(')
            .and_then(|x| x.strip_suffix(')'))
            .ok_or_else(|| PolyError::Parse { col: 0, msg: format!("expected (a1,...,an), got {t:?}") })?;
        if inner.trim().is_empty() {
            return Ok(MultiIndex(Vec::new()));
        }
        inner
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<u32>()
                    .map_err(|_| PolyError::Parse { col: 0, msg: format!("bad exponent {x:?}") })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(MultiIndex)
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Poly {
    nvars: usize,
    terms: BTreeMap<MultiIndex, Rational>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

pub fn poly_arith(a: &Poly, b: &Poly, op: ArithOp) -> Result<Poly, PolyError> {
    if a.nvars != b.nvars {
        return Err(PolyError::VarCountMismatch(a.nvars, b.nvars));
    }
    Ok(match op {
        ArithOp::Add => a + b,
        ArithOp::Sub => a - b,
        ArithOp::Mul => a * b,
    })
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Poly { nvars, terms: BTreeMap::new() }
    }

    pub fn one(nvars: usize) -> Self {
        Self::constant(nvars, Rational::one())
    }

    pub fn constant(nvars: usize, c: Rational) -> Self {
        Self::monomial(MultiIndex::zeros(nvars), c)
    }

    pub fn var(nvars: usize, i: usize) -> Self {
        Self::monomial(MultiIndex::unit(nvars, i), Rational::one())
    }

    pub fn monomial(exps: MultiIndex, c: Rational) -> Self {
        let nvars = exps.len();
        let mut terms = BTreeMap::new();
        if !c.is_zero() {
            terms.insert(exps, c);
        }
        Poly { nvars, terms }
    }

    pub fn from_terms<I: IntoIterator<Item = (MultiIndex, Rational)>>(nvars: usize, it: I) -> Self {
        let mut p = Poly::zero(nvars);
        for (m, c) in it {
            p.add_term(m, c);
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl DoubleEndedIterator<Item = (&MultiIndex, &Rational)> {
        self.terms.iter()
    }

    pub fn coeff(&self, m: &MultiIndex) -> Rational {
        self.terms.get(m).cloned().unwrap_or_else(Rational::zero)
    }

    pub fn add_term(&mut self, m: MultiIndex, c: Rational) {
        assert_eq!(m.len(), self.nvars, "monomial length mismatch");
        if c.is_zero() {
            return;
        }
        match self.terms.entry(m) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if o.get().is_zero() {
                    o.remove();
                }
            }
        }
    }

    pub fn scale(&self, c: &Rational) -> Poly {
        if c.is_zero() {
            return Poly::zero(self.nvars);
        }
        Poly { nvars: self.nvars, terms: self.terms.iter().map(|(m, a)| (m.clone(), a * c)).collect() }
    }

    pub fn mul_monomial(&self, m: &MultiIndex, c: &Rational) -> Poly {
        if c.is_zero() {
            return Poly::zero(self.nvars);
        }
        Poly { nvars: self.nvars, terms: self.terms.iter().map(|(k, a)| (k.add(m), a * c)).collect() }
    }

    pub fn pow(&self, k: u32) -> Poly {
        let mut acc = Poly::one(self.nvars);
        let mut base = self.clone();
        let mut e = k;
        while e > 0 {
            if e & 1 == 1 {
                acc = &acc * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        acc
    }

    /// `None` for the zero polynomial.
    pub fn total_degree(&self) -> Option<u32> {
        self.terms.keys().map(MultiIndex::degree).max()
    }

    pub fn degree_in(&self, var: usize) -> Option<u32> {
        self.terms.keys().map(|m| m.get(var)).max()
    }

    pub fn min_degree_in(&self, var: usize) -> Option<u32> {
        self.terms.keys().map(|m| m.get(var)).min()
    }

    /// Zero counts as homogeneous of every degree.
    pub fn is_homogeneous(&self, j: u32) -> bool {
        self.terms.keys().all(|m| m.degree() == j)
    }

    /// Iterated partial derivative `d^alpha`.
    pub fn derivative(&self, alpha: &MultiIndex) -> Poly {
        assert_eq!(alpha.len(), self.nvars, "derivative order length mismatch");
        let mut out = Poly::zero(self.nvars);
        for (m, c) in &self.terms {
            let Some(rest) = m.checked_sub(alpha) else { continue };
            let mut f = BigInt::one();
            for (a, b) in m.iter().zip(alpha.iter()) {
                for t in 0..*b {
                    f *= a - t;
                }
            }
            out.add_term(rest, c * Rational::from_integer(f));
        }
        out
    }

    pub fn eval(&self, point: &[Rational]) -> Rational {
        assert_eq!(point.len(), self.nvars, "evaluation point length mismatch");
        let mut acc = Rational::zero();
        for (m, c) in &self.terms {
            let mut t = c.clone();
            for (x, &e) in point.iter().zip(m.iter()) {
                if e > 0 {
                    t *= num_traits::pow(x.clone(), e as usize);
                }
            }
            acc += t;
        }
        acc
    }

    pub fn eval_f64(&self, point: &[f64]) -> f64 {
        self.to_f64().eval(point)
    }

    pub fn to_f64(&self) -> F64Poly {
        F64Poly {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, c)| (m.as_slice().to_vec(), rational_to_f64(c))).collect(),
        }
    }

    /// Substitutes `x_i -> subs[i]`; all substitutes share one target ring.
    pub fn compose(&self, subs: &[Poly]) -> Poly {
        assert_eq!(subs.len(), self.nvars, "substitution length mismatch");
        let target = subs.first().map(|p| p.nvars).unwrap_or(0);
        let mut cache: Vec<Vec<Poly>> = subs.iter().map(|p| vec![Poly::one(p.nvars), p.clone()]).collect();
        let mut out = Poly::zero(target);
        for (m, c) in &self.terms {
            let mut t = Poly::constant(target, c.clone());
            for (i, &e) in m.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                while cache[i].len() <= e as usize {
                    let next = &cache[i][cache[i].len() - 1] * &subs[i];
                    cache[i].push(next);
                }
                t = &t * &cache[i][e as usize];
            }
            out = &out + &t;
        }
        out
    }

    /// `p(x) -> p(theta x)` for signs `theta`; the first `theta.len()` variables
    /// are twisted, the rest left alone.
    pub fn twist(&self, theta: &[i8]) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (m, c) in &self.terms {
            let neg = theta.iter().enumerate().filter(|(i, &t)| t < 0 && m.get(*i) % 2 == 1).count() % 2 == 1;
            out.add_term(m.clone(), if neg { -c.clone() } else { c.clone() });
        }
        out
    }

    /// Re-homes variable `i` as variable `map[i]` of a ring with `nvars` variables.
    pub fn embed(&self, nvars: usize, map: &[usize]) -> Poly {
        assert_eq!(map.len(), self.nvars, "embedding map length mismatch");
        let mut out = Poly::zero(nvars);
        for (m, c) in &self.terms {
            let mut e = vec![0u32; nvars];
            for (i, &k) in m.iter().enumerate() {
                e[map[i]] += k;
            }
            out.add_term(MultiIndex(e), c.clone());
        }
        out
    }

    /// Embeds into the first `self.nvars` slots of a larger ring.
    pub fn widen(&self, nvars: usize) -> Poly {
        let map: Vec<usize> = (0..self.nvars).collect();
        self.embed(nvars, &map)
    }

    /// Keeps only the first `k` variables; panics if a dropped variable occurs.
    pub fn narrow(&self, k: usize) -> Poly {
        let mut out = Poly::zero(k);
        for (m, c) in &self.terms {
            assert!(m.as_slice()[k..].iter().all(|&e| e == 0), "narrow would drop a live variable");
            out.add_term(MultiIndex(m.as_slice()[..k].to_vec()), c.clone());
        }
        out
    }

    /// Terms whose exponent in `var` equals `k`, with that exponent cleared.
    pub fn coeff_of_var(&self, var: usize, k: u32) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (m, c) in &self.terms {
            if m.get(var) == k {
                let mut e = m.clone();
                e.set(var, 0);
                out.add_term(e, c.clone());
            }
        }
        out
    }

    /// Groups terms by their exponents in `vars`; keys have length `vars.len()`,
    /// values have those exponents cleared.
    pub fn split_by_vars(&self, vars: &[usize]) -> BTreeMap<MultiIndex, Poly> {
        let mut out: BTreeMap<MultiIndex, Poly> = BTreeMap::new();
        for (m, c) in &self.terms {
            let key = MultiIndex(vars.iter().map(|&v| m.get(v)).collect());
            let mut e = m.clone();
            for &v in vars {
                e.set(v, 0);
            }
            out.entry(key).or_insert_with(|| Poly::zero(self.nvars)).add_term(e, c.clone());
        }
        out
    }

    /// Replaces variable `var` by the constant `value`.
    pub fn subst_const(&self, var: usize, value: &Rational) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (m, c) in &self.terms {
            let e = m.get(var);
            let mut k = m.clone();
            k.set(var, 0);
            out.add_term(k, c * num_traits::pow(value.clone(), e as usize));
        }
        out
    }

    /// Exact division by `x_0^2 + ... + x_{n-1}^2`, if it divides.
    pub fn div_norm_sq(&self, n: usize) -> Option<Poly> {
        let mut rem = self.clone();
        let mut quo = Poly::zero(self.nvars);
        let rest: Vec<(MultiIndex, Rational)> =
            (1..n).map(|i| (MultiIndex::scaled_unit(self.nvars, i, 2), Rational::one())).collect();
        loop {
            let lead = rem.terms.iter().rev().find(|(m, _)| m.get(0) >= 2).map(|(m, c)| (m.clone(), c.clone()));
            let Some((m, c)) = lead else { break };
            let mut q = m.clone();
            q.set(0, m.get(0) - 2);
            rem.add_term(m, -c.clone());
            for (r, one) in &rest {
                rem.add_term(q.add(r), -(c.clone() * one));
            }
            quo.add_term(q, c);
        }
        if rem.is_zero() {
            Some(quo)
        } else {
            None
        }
    }

    /// Deterministic search for a point where `self` is nonzero. Scans the
    /// grid with coordinates `1, -1, 2, -2, ..., K, -K, 0` where
    /// `K = ceil(D/2) + 1`; the grid has more than `D + 1` values per axis so a
    /// nonzero polynomial cannot vanish on all of it.
    pub fn find_nonvanishing_witness(&self) -> Option<Vec<Rational>> {
        if self.is_zero() {
            return None;
        }
        let d = self.total_degree().unwrap_or(0);
        let k = (d as i64 + 1) / 2 + 1;
        let mut values: Vec<Rational> = Vec::new();
        for v in 1..=k {
            values.push(rat(v));
            values.push(rat(-v));
        }
        values.push(rat(0));
        // Only variables that occur need to be scanned.
        let live: Vec<usize> = (0..self.nvars).filter(|&i| self.degree_in(i).unwrap_or(0) > 0).collect();
        let mut idx = vec![0usize; live.len()];
        loop {
            let mut point = vec![Rational::zero(); self.nvars];
            for (slot, &var) in live.iter().enumerate() {
                point[var] = values[idx[slot]].clone();
            }
            if !self.eval(&point).is_zero() {
                return Some(point);
            }
            let mut pos = 0;
            loop {
                if pos == live.len() {
                    // Grid exhausted; impossible for a nonzero polynomial.
                    return None;
                }
                idx[pos] += 1;
                if idx[pos] < values.len() {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
        }
    }

    /// Sum of absolute values of coefficients.
    pub fn coeff_l1(&self) -> Rational {
        self.terms.values().map(|c| c.abs()).fold(Rational::zero(), |a, b| a + b)
    }

    pub fn max_abs_coeff(&self) -> Rational {
        self.terms.values().map(|c| c.abs()).max().unwrap_or_else(Rational::zero)
    }

    /// Term list with the given variable names, highest lexicographic term first.
    pub fn to_text_with(&self, names: &[String]) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let mut s = String::new();
        for (i, (m, c)) in self.terms.iter().rev().enumerate() {
            let neg = c.is_negative();
            let a = c.abs();
            if i == 0 {
                if neg {
                    s.push('-');
                }
            } else {
                s.push_str(if neg { " - " } else { " + " });
            }
            let mut factors: Vec<String> = Vec::new();
            for (v, &e) in m.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let name = names.get(v).cloned().unwrap_or_else(|| format!("x{}", v + 1));
                factors.push(if e == 1 { name } else { format!("{name}^{e}") });
            }
            if factors.is_empty() || !a.is_one() {
                factors.insert(0, rational_to_string(&a));
            }
            s.push_str(&factors.join("*"));
        }
        s
    }

    pub fn to_text(&self) -> String {
        self.to_text_with(&default_names(self.nvars))
    }

    /// `{"(a1,...,an)": "coeff"}` form.
    pub fn to_json_map(&self) -> BTreeMap<String, String> {
        self.terms.iter().map(|(m, c)| (m.to_string(), rational_to_string(c))).collect()
    }

    pub fn from_json_map(nvars: usize, map: &BTreeMap<String, String>) -> Result<Poly, PolyError> {
        let mut p = Poly::zero(nvars);
        for (k, v) in map {
            let m: MultiIndex = k.parse()?;
            if m.len() != nvars {
                return Err(PolyError::VarCountMismatch(m.len(), nvars));
            }
            p.add_term(m, parse_rational(v)?);
        }
        Ok(p)
    }

    /// Parses a term list such as `3*u1^2*u2 - 1/2 u2^3`. Variables are
    /// `u<i>`, `y<i>`, `x<i>` or `w<i>` with 1-based `i <= nvars`.
    pub fn parse(text: &str, nvars: usize) -> Result<Poly, PolyError> {
        Parser::new(text, nvars).parse()
    }
}

pub fn default_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("u{i}")).collect()
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl Add for &Poly {
    type Output = Poly;
    fn add(self, rhs: &Poly) -> Poly {
        assert_eq!(self.nvars, rhs.nvars, "variable count mismatch");
        let (big, small) = if self.terms.len() >= rhs.terms.len() { (self, rhs) } else { (rhs, self) };
        let mut out = big.clone();
        for (m, c) in &small.terms {
            out.add_term(m.clone(), c.clone());
        }
        out
    }
}

impl Sub for &Poly {
    type Output = Poly;
    fn sub(self, rhs: &Poly) -> Poly {
        assert_eq!(self.nvars, rhs.nvars, "variable count mismatch");
        let mut out = self.clone();
        for (m, c) in &rhs.terms {
            out.add_term(m.clone(), -c.clone());
        }
        out
    }
}

impl Mul for &Poly {
    type Output = Poly;
    fn mul(self, rhs: &Poly) -> Poly {
        assert_eq!(self.nvars, rhs.nvars, "variable count mismatch");
        let mut out = Poly::zero(self.nvars);
        for (m1, c1) in &self.terms {
            for (m2, c2) in &rhs.terms {
                out.add_term(m1.add(m2), c1 * c2);
            }
        }
        out
    }
}

impl Neg for &Poly {
    type Output = Poly;
    fn neg(self) -> Poly {
        Poly { nvars: self.nvars, terms: self.terms.iter().map(|(m, c)| (m.clone(), -c.clone())).collect() }
    }
}

macro_rules! owned_ops {
    ($t:ty) => {
        impl Add for $t {
            type Output = $t;
            fn add(self, rhs: $t) -> $t {
                &self + &rhs
            }
        }
        impl Sub for $t {
            type Output = $t;
            fn sub(self, rhs: $t) -> $t {
                &self - &rhs
            }
        }
        impl Mul for $t {
            type Output = $t;
            fn mul(self, rhs: $t) -> $t {
                &self * &rhs
            }
        }
        impl Neg for $t {
            type Output = $t;
            fn neg(self) -> $t {
                -&self
            }
        }
    };
}
owned_ops!(Poly);

/// Floating-point copy of a polynomial for fast repeated evaluation.
#[derive(Clone, Debug)]
pub struct F64Poly {
    pub nvars: usize,
    pub terms: Vec<(Vec<u32>, f64)>,
}

impl F64Poly {
    pub fn eval(&self, point: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (m, c) in &self.terms {
            let mut t = *c;
            for (x, &e) in point.iter().zip(m) {
                if e > 0 {
                    t *= x.powi(e as i32);
                }
            }
            acc += t;
        }
        acc
    }
}

struct Parser<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
    nvars: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, nvars: usize) -> Self {
        Parser { src, chars: src.char_indices().collect(), pos: 0, nvars }
    }

    fn col(&self) -> usize {
        self.chars.get(self.pos).map(|(i, _)| *i + 1).unwrap_or(self.src.len() + 1)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, PolyError> {
        Err(PolyError::Parse { col: self.col(), msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|(_, c)| *c)
    }

    fn parse(mut self) -> Result<Poly, PolyError> {
        self.skip_ws();
        if self.peek().is_none() {
            return self.err("empty polynomial");
        }
        let out = self.expr()?;
        self.skip_ws();
        match self.peek() {
            None => Ok(out),
            Some(')') => self.err("unbalanced ')'"),
            Some(c) => self.err(format!("expected '+' or '-', found {c:?}")),
        }
    }

    // expr := ['+'|'-'] term (('+'|'-') term)*
    fn expr(&mut self) -> Result<Poly, PolyError> {
        let mut out = Poly::zero(self.nvars);
        let mut first = true;
        loop {
            self.skip_ws();
            let mut negate = false;
            match self.peek() {
                Some('+') => self.pos += 1,
                Some('-') => {
                    self.pos += 1;
                    negate = true;
                }
                _ if first => {}
                _ => break,
            }
            first = false;
            let t = self.term()?;
            out = if negate { &out - &t } else { &out + &t };
        }
        Ok(out)
    }

    // term := factor (['*'] factor)*
    fn term(&mut self) -> Result<Poly, PolyError> {
        let mut acc = self.factor(true)?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some('*') => {
                    self.pos += 1;
                }
                Some(c) if c.is_ascii_alphanumeric() || c == '(' => {}
                _ => break,
            }
            let f = self.factor(false)?;
            acc = &acc * &f;
        }
        Ok(acc)
    }

    // factor := (number | variable | '(' expr ')') ['^' digits]
    fn factor(&mut self, leading: bool) -> Result<Poly, PolyError> {
        self.skip_ws();
        let base = match self.peek() {
            Some(c) if c.is_ascii_digit() => Poly::constant(self.nvars, self.number()?),
            Some(c) if c.is_ascii_alphabetic() => {
                let v = self.variable()?;
                Poly::var(self.nvars, v)
            }
            Some('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.skip_ws();
                if self.peek() != Some(')') {
                    return self.err("expected ')'");
                }
                self.pos += 1;
                inner
            }
            Some(c) if leading => return self.err(format!("expected a coefficient or variable, found {c:?}")),
            Some(c) => return self.err(format!("unexpected {c:?}")),
            None => return self.err("expected a coefficient or variable"),
        };
        self.skip_ws();
        if self.peek() == Some('^') {
            self.pos += 1;
            self.skip_ws();
            let d = self.digits();
            let e: u32 = d.parse().map_err(|_| PolyError::Parse { col: self.col(), msg: "expected an exponent".into() })?;
            return Ok(base.pow(e));
        }
        Ok(base)
    }

    fn digits(&mut self) -> String {
        let mut s = String::new();
        while let Some(c) = self.peek().filter(char::is_ascii_digit) {
            s.push(c);
            self.pos += 1;
        }
        s
    }

    fn number(&mut self) -> Result<Rational, PolyError> {
        let start = self.col();
        let mut s = self.digits();
        if self.peek() == Some('.') {
            self.pos += 1;
            s.push('.');
            s.push_str(&self.digits());
        } else {
            self.skip_ws();
            if self.peek() == Some('/') {
                self.pos += 1;
                self.skip_ws();
                let d = self.digits();
                if d.is_empty() {
                    return self.err("expected a denominator");
                }
                s.push('/');
                s.push_str(&d);
            }
        }
        parse_rational(&s).map_err(|_| PolyError::Parse { col: start, msg: format!("bad number {s:?}") })
    }

    fn variable(&mut self) -> Result<usize, PolyError> {
        let start = self.col();
        let c = self.peek().unwrap_or(' ');
        if !matches!(c, 'u' | 'y' | 'x' | 'w') {
            return self.err(format!("unknown variable prefix {c:?} (use u1..u{})", self.nvars));
        }
        self.pos += 1;
        let idx = self.digits();
        let i: usize = idx
            .parse()
            .map_err(|_| PolyError::Parse { col: start, msg: "variable needs an index, e.g. u1".into() })?;
        if i == 0 || i > self.nvars {
            return Err(PolyError::Parse { col: start, msg: format!("variable index {i} out of range 1..{}", self.nvars) });
        }
        Ok(i - 1)
    }
}

/// Variable layout of the quotient ring: `u_1..u_n, tau, s, p_1..p_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HomoLayout {
    pub n: usize,
    pub nparams: usize,
}

impl HomoLayout {
    pub fn new(n: usize, nparams: usize) -> Self {
        HomoLayout { n, nparams }
    }

    pub fn nvars(&self) -> usize {
        self.n + 2 + self.nparams
    }

    pub fn tau(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.n + 1
    }

    pub fn param(&self, k: usize) -> usize {
        self.n + 2 + k
    }

    /// `u_1^2 + ... + u_n^2` in this layout.
    pub fn norm_sq(&self) -> Poly {
        let mut p = Poly::zero(self.nvars());
        for i in 0..self.n {
            p.add_term(MultiIndex::scaled_unit(self.nvars(), i, 2), Rational::one());
        }
        p
    }

    /// Lifts a polynomial in `u` alone.
    pub fn lift_u(&self, p: &Poly) -> Poly {
        assert_eq!(p.nvars(), self.n, "expected a polynomial in u");
        p.widen(self.nvars())
    }

    pub fn var(&self, i: usize) -> Poly {
        Poly::var(self.nvars(), i)
    }

    pub fn tau_pow(&self, k: u32) -> Poly {
        Poly::monomial(MultiIndex::scaled_unit(self.nvars(), self.tau(), k), Rational::one())
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = default_names(self.n);
        v.push("tau".into());
        v.push("s".into());
        for k in 0..self.nparams {
            v.push(format!("p{}", k + 1));
        }
        v
    }
}

/// `body / s^spow` with `s = |u|`, body reduced to s-degree at most 1.
#[derive(Clone, Debug)]
pub struct HomoElem {
    layout: HomoLayout,
    body: Poly,
    spow: u32,
}

impl HomoElem {
    pub fn new(layout: HomoLayout, body: Poly, spow: u32) -> Self {
        assert_eq!(body.nvars(), layout.nvars(), "body does not match layout");
        HomoElem { layout, body: reduce_body(&layout, &body), spow }
    }

    pub fn zero(layout: HomoLayout) -> Self {
        HomoElem { layout, body: Poly::zero(layout.nvars()), spow: 0 }
    }

    pub fn one(layout: HomoLayout) -> Self {
        Self::constant(layout, Rational::one())
    }

    pub fn constant(layout: HomoLayout, c: Rational) -> Self {
        HomoElem { layout, body: Poly::constant(layout.nvars(), c), spow: 0 }
    }

    pub fn from_poly(layout: HomoLayout, body: Poly) -> Self {
        Self::new(layout, body, 0)
    }

    /// The symbol `s = |u|`.
    pub fn s(layout: HomoLayout) -> Self {
        HomoElem { layout, body: layout.var(layout.s()), spow: 0 }
    }

    pub fn layout(&self) -> HomoLayout {
        self.layout
    }

    pub fn body(&self) -> &Poly {
        &self.body
    }

    pub fn spow(&self) -> u32 {
        self.spow
    }

    pub fn is_zero(&self) -> bool {
        self.body.is_zero()
    }

    /// Re-applies `s^2 -> |u|^2`; idempotent.
    pub fn reduce(&self) -> HomoElem {
        HomoElem { layout: self.layout, body: reduce_body(&self.layout, &self.body), spow: self.spow }
    }

    /// Same value with the smallest possible `spow`.
    pub fn canonical(&self) -> HomoElem {
        if self.body.is_zero() {
            return HomoElem::zero(self.layout);
        }
        let s = self.layout.s();
        let mut body = self.body.clone();
        let mut spow = self.spow;
        while spow > 0 {
            let a = body.coeff_of_var(s, 0);
            let b = body.coeff_of_var(s, 1);
            let a_div = if a.is_zero() { Some(a.clone()) } else { a.div_norm_sq(self.layout.n) };
            let Some(a_div) = a_div else { break };
            // (N a' + s b) / s^k = (b + s a') / s^(k-1)
            let mut next = b;
            next = &next + &a_div.mul_monomial(&MultiIndex::unit(self.layout.nvars(), s), &Rational::one());
            body = next;
            spow -= 1;
        }
        HomoElem { layout: self.layout, body, spow }
    }

    /// Multiplies numerator and denominator by `s^k`.
    pub fn with_spow(&self, spow: u32) -> HomoElem {
        assert!(spow >= self.spow, "cannot lower spow without division");
        let k = spow - self.spow;
        let m = MultiIndex::scaled_unit(self.layout.nvars(), self.layout.s(), k);
        HomoElem::new(self.layout, self.body.mul_monomial(&m, &Rational::one()), spow)
    }

    pub fn scale(&self, c: &Rational) -> HomoElem {
        HomoElem { layout: self.layout, body: self.body.scale(c), spow: self.spow }
    }

    pub fn mul_poly(&self, p: &Poly) -> HomoElem {
        HomoElem::new(self.layout, &self.body * p, self.spow)
    }

    pub fn pow(&self, k: u32) -> HomoElem {
        let mut acc = HomoElem::one(self.layout);
        for _ in 0..k {
            acc = &acc * self;
        }
        acc
    }

    /// Largest power of tau present.
    pub fn tau_degree(&self) -> Option<u32> {
        self.body.degree_in(self.layout.tau())
    }

    pub fn min_tau_degree(&self) -> Option<u32> {
        self.body.min_degree_in(self.layout.tau())
    }

    /// Coefficient of `tau^k` (a tau-free element).
    pub fn tau_coeff(&self, k: u32) -> HomoElem {
        HomoElem { layout: self.layout, body: self.body.coeff_of_var(self.layout.tau(), k), spow: self.spow }
    }

    /// Coefficient of `p_k^e`.
    pub fn param_coeff(&self, k: usize, e: u32) -> HomoElem {
        HomoElem { layout: self.layout, body: self.body.coeff_of_var(self.layout.param(k), e), spow: self.spow }
    }

    pub fn subst_param(&self, k: usize, v: &Rational) -> HomoElem {
        HomoElem { layout: self.layout, body: self.body.subst_const(self.layout.param(k), v), spow: self.spow }
    }

    pub fn subst_tau(&self, v: &Rational) -> HomoElem {
        HomoElem { layout: self.layout, body: self.body.subst_const(self.layout.tau(), v), spow: self.spow }
    }

    /// Moves into a layout with more parameters (existing ones keep their slots).
    pub fn widen_params(&self, nparams: usize) -> HomoElem {
        assert!(nparams >= self.layout.nparams);
        let layout = HomoLayout::new(self.layout.n, nparams);
        HomoElem { layout, body: self.body.widen(layout.nvars()), spow: self.spow }
    }

    /// If the value is `W(u, params) / s^k` with `W` free of `s` and tau,
    /// returns `(W, k)` after lowering `k` as far as possible.
    pub fn as_polynomial_over_norm(&self) -> Option<(Poly, u32)> {
        let c = self.canonical();
        let s = self.layout.s();
        let a = c.body.coeff_of_var(s, 0);
        let b = c.body.coeff_of_var(s, 1);
        if b.is_zero() {
            Some((a, c.spow))
        } else if a.is_zero() && c.spow > 0 {
            Some((b, c.spow - 1))
        } else {
            None
        }
    }

    /// Evaluates at `u`, `tau` and parameter values, with `s = |u|`.
    pub fn eval_f64(&self, u: &[f64], tau: f64, params: &[f64]) -> f64 {
        self.compile().eval(u, tau, params)
    }

    pub fn compile(&self) -> CompiledHomo {
        CompiledHomo { layout: self.layout, body: self.body.to_f64(), spow: self.spow }
    }

    /// Canonical text form `(...)/s^k`.
    pub fn to_text(&self) -> String {
        let c = self.canonical();
        let body = c.body.to_text_with(&self.layout.names());
        if c.spow == 0 {
            body
        } else {
            format!("({body})/s^{}", c.spow)
        }
    }
}

#[derive(Clone, Debug)]
pub struct CompiledHomo {
    layout: HomoLayout,
    body: F64Poly,
    spow: u32,
}

impl CompiledHomo {
    pub fn eval(&self, u: &[f64], tau: f64, params: &[f64]) -> f64 {
        let mut point = Vec::with_capacity(self.layout.nvars());
        point.extend_from_slice(u);
        point.push(tau);
        let s = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        point.push(s);
        point.extend_from_slice(params);
        point.resize(self.layout.nvars(), 0.0);
        self.body.eval(&point) / s.powi(self.spow as i32)
    }
}

fn reduce_body(layout: &HomoLayout, body: &Poly) -> Poly {
    let s = layout.s();
    if body.degree_in(s).unwrap_or(0) < 2 {
        return body.clone();
    }
    let n2 = layout.norm_sq();
    let mut pows: Vec<Poly> = vec![Poly::one(layout.nvars())];
    let mut out = Poly::zero(layout.nvars());
    for (m, c) in body.terms() {
        let e = m.get(s);
        if e < 2 {
            out.add_term(m.clone(), c.clone());
            continue;
        }
        let q = (e / 2) as usize;
        while pows.len() <= q {
            let next = &pows[pows.len() - 1] * &n2;
            pows.push(next);
        }
        let mut k = m.clone();
        k.set(s, e % 2);
        out = &out + &pows[q].mul_monomial(&k, c);
    }
    out
}

impl PartialEq for HomoElem {
    fn eq(&self, other: &HomoElem) -> bool {
        if self.layout != other.layout {
            return false;
        }
        let k = self.spow.max(other.spow);
        self.with_spow(k).body == other.with_spow(k).body
    }
}

impl Eq for HomoElem {}

impl Add for &HomoElem {
    type Output = HomoElem;
    fn add(self, rhs: &HomoElem) -> HomoElem {
        assert_eq!(self.layout, rhs.layout, "layout mismatch");
        if rhs.is_zero() {
            return self.clone();
        }
        if self.is_zero() {
            return rhs.clone();
        }
        let k = self.spow.max(rhs.spow);
        let a = self.with_spow(k);
        let b = rhs.with_spow(k);
        HomoElem { layout: self.layout, body: &a.body + &b.body, spow: k }
    }
}

impl Sub for &HomoElem {
    type Output = HomoElem;
    fn sub(self, rhs: &HomoElem) -> HomoElem {
        self + &(-rhs)
    }
}

impl Mul for &HomoElem {
    type Output = HomoElem;
    fn mul(self, rhs: &HomoElem) -> HomoElem {
        assert_eq!(self.layout, rhs.layout, "layout mismatch");
        if self.is_zero() || rhs.is_zero() {
            return HomoElem::zero(self.layout);
        }
        HomoElem::new(self.layout, &self.body * &rhs.body, self.spow + rhs.spow)
    }
}

impl Neg for &HomoElem {
    type Output = HomoElem;
    fn neg(self) -> HomoElem {
        HomoElem { layout: self.layout, body: -&self.body, spow: self.spow }
    }
}
owned_ops!(HomoElem);

/// Evaluates `p` at a point whose coordinates are quotient-ring elements.
pub fn eval_at_homo(p: &Poly, point: &[HomoElem]) -> HomoElem {
    assert_eq!(p.nvars(), point.len(), "point length mismatch");
    let layout = point.first().map(|h| h.layout()).expect("empty point");
    let mut cache: Vec<Vec<HomoElem>> = point.iter().map(|h| vec![HomoElem::one(layout), h.clone()]).collect();
    let mut out = HomoElem::zero(layout);
    for (m, c) in p.terms() {
        let mut t = HomoElem::constant(layout, c.clone());
        for (i, &e) in m.iter().enumerate() {
            if e == 0 {
                continue;
            }
            while cache[i].len() <= e as usize {
                let next = &cache[i][cache[i].len() - 1] * &point[i];
                cache[i].push(next);
            }
            t = &t * &cache[i][e as usize];
        }
        out = &out + &t;
    }
    out
}

/// `p(v + w) = sum_alpha (d^alpha p)(v) / alpha! * w^alpha`; returns the
/// coefficients `(d^alpha p)(v) / alpha!` for every `alpha` with
/// `|alpha| <= deg p` (zeros included).
pub fn taylor_shift(p: &Poly, v: &[HomoElem]) -> BTreeMap<MultiIndex, HomoElem> {
    let d = p.total_degree().unwrap_or(0);
    let mut out = BTreeMap::new();
    for alpha in MultiIndex::graded(p.nvars(), 0, d) {
        let inv = Rational::new(BigInt::one(), alpha.factorial());
        let c = eval_at_homo(&p.derivative(&alpha), v).scale(&inv);
        out.insert(alpha, c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p2(s: &str) -> Poly {
        Poly::parse(s, 2).unwrap()
    }

    #[test]
    fn arithmetic_examples() {
        assert_eq!(&p2("u1^2") + &p2("u1^2"), p2("2*u1^2"));
        assert_eq!(&p2("u1 + u2") * &p2("u1 - u2"), p2("u1^2 - u2^2"));
        assert!((&p2("u1^3 + 7") * &Poly::zero(2)).is_zero());
        assert!(poly_arith(&p2("u1"), &Poly::var(3, 0), ArithOp::Add).is_err());
    }

    #[test]
    fn derivative_examples() {
        let sq = p2("y1^2 + y2^2");
        assert_eq!(sq.derivative(&MultiIndex::new(vec![2, 0])), Poly::constant(2, rat(2)));
        let q = p2("y1^2 - y2^2");
        assert!(q.derivative(&MultiIndex::new(vec![1, 1])).is_zero());
        assert!(p2("y1^2").derivative(&MultiIndex::new(vec![3, 0])).is_zero());
    }

    #[test]
    fn homogeneity() {
        assert!(p2("y1*y2 + y2^2").is_homogeneous(2));
        assert!(!p2("y1^2 + y1").is_homogeneous(2));
        assert!(Poly::zero(2).is_homogeneous(7));
    }

    #[test]
    fn parse_and_print_round_trip() {
        let p = Poly::parse("3*u1^2*u2 - 1/2 u2^3 + u1", 2).unwrap();
        assert_eq!(p.coeff(&MultiIndex::new(vec![0, 3])), rat_frac(-1, 2));
        assert_eq!(Poly::parse(&p.to_text(), 2).unwrap(), p);
        assert_eq!(Poly::from_json_map(2, &p.to_json_map()).unwrap(), p);
        assert!(matches!(Poly::parse("u3", 2), Err(PolyError::Parse { col: 1, .. })));
        assert!(Poly::parse("2 +", 2).is_err());
        assert!(Poly::parse("", 2).is_err());
    }

    #[test]
    fn witness_examples() {
        assert!(p2("u1*u2 - u2*u1").find_nonvanishing_witness().is_none());
        assert!(Poly::zero(2).find_nonvanishing_witness().is_none());
        let p = p2("u1^2 - u2^2");
        let w = p.find_nonvanishing_witness().unwrap();
        assert!(!p.eval(&w).is_zero());
    }

    #[test]
    fn reduction_examples() {
        let l = HomoLayout::new(2, 0);
        let s = l.var(l.s());
        let u1 = l.var(0);
        let e = HomoElem::new(l, &(&s * &s) * &u1, 0);
        assert_eq!(e.body(), &(&l.norm_sq() * &u1));
        let e3 = HomoElem::new(l, s.pow(3), 0);
        assert_eq!(e3.body(), &(&s * &l.norm_sq()));
        assert_eq!(e3.reduce().body(), e3.body());
    }

    #[test]
    fn canonical_lowers_spow() {
        let l = HomoLayout::new(2, 0);
        // |u|^2 u1 / s^3 == u1 / s
        let e = HomoElem::new(l, &l.norm_sq() * &l.var(0), 3);
        let c = e.canonical();
        assert_eq!(c.spow(), 1);
        assert_eq!(c.body(), &l.var(0));
        // s / s = 1
        let one = HomoElem::new(l, l.var(l.s()), 1).canonical();
        assert_eq!(one.spow(), 0);
        assert_eq!(one, HomoElem::one(l));
    }

    #[test]
    fn parenthesized_groups() {
        let q = Poly::parse("u1^2 - u2^2", 2).unwrap();
        assert_eq!(Poly::parse("(u1^2 - u2^2)^2", 2).unwrap(), q.pow(2));
        assert_eq!(Poly::parse("-2 (u1 + u2)(u1 - u2)", 2).unwrap(), q.scale(&rat(-2)));
        assert_eq!(Poly::parse("((u1))^3 * 1/2", 2).unwrap(), Poly::parse("1/2 u1^3", 2).unwrap());
        assert!(Poly::parse("(u1 + u2", 2).is_err());
        assert!(Poly::parse("u1 + u2)", 2).is_err());
    }

    #[test]
    fn taylor_binomial() {
        let l = HomoLayout::new(1, 1);
        let a = HomoElem::from_poly(l, l.var(l.param(0)));
        let t = taylor_shift(&Poly::parse("y1^2", 1).unwrap(), &[a.clone()]);
        assert_eq!(t[&MultiIndex::new(vec![0])], &a * &a);
        assert_eq!(t[&MultiIndex::new(vec![1])], a.scale(&rat(2)));
        assert_eq!(t[&MultiIndex::new(vec![2])], HomoElem::one(l));
    }

    #[test]
    fn graded_order() {
        let g = MultiIndex::graded(2, 1, 2);
        let v: Vec<Vec<u32>> = g.iter().map(|m| m.as_slice().to_vec()).collect();
        assert_eq!(v, vec![vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(MultiIndex::new(vec![1, 2]).insert(1, 5).as_slice(), &[1, 5, 2]);
    }

    #[test]
    fn decimal_rationals() {
        assert_eq!(parse_rational("0.25").unwrap(), rat_frac(1, 4));
        assert_eq!(parse_rational("-1.5").unwrap(), rat_frac(-3, 2));
        assert!(parse_rational("1/0").is_err());
    }
}
