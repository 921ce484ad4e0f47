//! Sparse multivariate polynomials over `R^d`.
//!
//! A [`Polynomial`] is a map from exponent vectors ([`MultiIndex`]) to
//! non-zero `f64` coefficients. Multi-indices are ordered graded
//! lexicographically: lower total degree first, and within one degree the
//! exponent of `x_1` descends first (`x1^2 < x1 x2 < x2^2`). That order fixes
//! the row layout of the ridge expansion matrix.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        MultiIndex(exponents)
    }

    pub fn zero(dim: usize) -> Self {
        MultiIndex(vec![0; dim])
    }

    /// The index of the single variable `x_{var}` (0-based).
    pub fn unit(dim: usize, var: usize) -> Self {
        let mut e = vec![0; dim];
        e[var] = 1;
        MultiIndex(e)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> usize {
        self.0.iter().map(|&e| e as usize).sum()
    }

    /// `prod_j x_j^{a_j}`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, &xj)| xj.powi(e as i32))
            .product()
    }

    /// Multinomial coefficient `s! / prod_j a_j!` with `s = |a|`.
    pub fn multinomial(&self) -> f64 {
        // Built as a product of binomials so intermediate values stay exact
        // far beyond the degrees used here.
        let mut total = 0u32;
        let mut acc = 1.0;
        for &e in &self.0 {
            for i in 1..=e {
                total += 1;
                acc = acc * total as f64 / i as f64;
            }
        }
        acc.round()
    }
}

impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All exponent vectors of total degree exactly `s` in `dim` variables, in
/// graded-lex order.
pub fn homogeneous_indices(dim: usize, s: usize) -> Vec<MultiIndex> {
    fn rec(var: usize, remaining: u32, cur: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
        if var + 1 == cur.len() {
            cur[var] = remaining;
            out.push(MultiIndex(cur.clone()));
            return;
        }
        for e in (0..=remaining).rev() {
            cur[var] = e;
            rec(var + 1, remaining - e, cur, out);
        }
    }
    let mut out = Vec::new();
    if dim == 0 {
        return out;
    }
    let mut cur = vec![0; dim];
    rec(0, s as u32, &mut cur, &mut out);
    out
}

/// All non-constant exponent vectors of degree `1..=q`, graded-lex order.
pub fn nonconstant_indices(dim: usize, q: usize) -> Vec<MultiIndex> {
    (1..=q).flat_map(|s| homogeneous_indices(dim, s)).collect()
}

fn binomial(n: u64, k: u64) -> Result<u64> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k {
        // acc * (n - k + i) / i is an integer at every step
        acc = acc
            .checked_mul((n - k + i) as u128)
            .ok_or(Error::Overflow("binomial coefficient"))?
            / i as u128;
    }
    u64::try_from(acc).map_err(|_| Error::Overflow("binomial coefficient"))
}

/// `dim P_q(R^d) = C(d+q, q)`, constant term included.
pub fn dim_poly_space(d: usize, q: usize) -> Result<u64> {
    if d == 0 {
        return Err(Error::InvalidInput("dimension must be at least 1".into()));
    }
    let n = (d as u64)
        .checked_add(q as u64)
        .ok_or(Error::Overflow("d + q"))?;
    binomial(n, q as u64)
}

/// `dim P^h_s(R^d) = C(d-1+s, s)`. This is also the ridge direction count n_q.
pub fn dim_homogeneous(d: usize, s: usize) -> Result<u64> {
    if d == 0 {
        return Err(Error::InvalidInput("dimension must be at least 1".into()));
    }
    let n = (d as u64 - 1)
        .checked_add(s as u64)
        .ok_or(Error::Overflow("d - 1 + s"))?;
    binomial(n, s as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolynomialJson", into = "PolynomialJson")]
pub struct Polynomial {
    dim: usize,
    degree: usize,
    terms: BTreeMap<MultiIndex, f64>,
}

impl Polynomial {
    /// Builds a polynomial from `(exponents, coefficient)` pairs. Repeated
    /// indices are summed and exact zeros dropped.
    pub fn new<I>(dim: usize, degree: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (MultiIndex, f64)>,
    {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be at least 1".into()));
        }
        let mut map = BTreeMap::new();
        for (idx, coef) in terms {
            if idx.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: idx.dim(),
                });
            }
            if idx.degree() > degree {
                return Err(Error::InvalidInput(format!(
                    "term of degree {} exceeds declared degree {degree}",
                    idx.degree()
                )));
            }
            if !coef.is_finite() {
                return Err(Error::InvalidInput("non-finite coefficient".into()));
            }
            *map.entry(idx).or_insert(0.0) += coef;
        }
        map.retain(|_, c| *c != 0.0);
        Ok(Polynomial {
            dim,
            degree,
            terms: map,
        })
    }

    pub fn zero(dim: usize, degree: usize) -> Self {
        Polynomial {
            dim,
            degree,
            terms: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Declared degree bound q (the largest term may be of lower degree).
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Largest total degree over the stored terms.
    pub fn actual_degree(&self) -> usize {
        self.terms.keys().map(|k| k.degree()).max().unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, f64)> {
        self.terms.iter().map(|(k, &c)| (k, c))
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, idx: &MultiIndex) -> f64 {
        self.terms.get(idx).copied().unwrap_or(0.0)
    }

    /// `Q(0)`.
    pub fn constant_term(&self) -> f64 {
        self.coefficient(&MultiIndex::zero(self.dim))
    }

    pub fn max_abs_coef(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(idx, c)| c * idx.eval(x)).sum()
    }

    /// `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &Polynomial, b: f64) -> Result<Polynomial> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let terms = self
            .terms()
            .map(|(k, c)| (k.clone(), a * c))
            .chain(other.terms().map(|(k, c)| (k.clone(), b * c)));
        Polynomial::new(self.dim, self.degree.max(other.degree), terms)
    }

    /// Largest coefficient difference over the union of both supports.
    pub fn max_coef_diff(&self, other: &Polynomial) -> f64 {
        self.terms()
            .map(|(k, c)| (c - other.coefficient(k)).abs())
            .chain(
                other
                    .terms()
                    .map(|(k, c)| (c - self.coefficient(k)).abs()),
            )
            .fold(0.0, f64::max)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (n, (idx, c)) in self.terms.iter().enumerate() {
            if n > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c}")?;
            for (j, &e) in idx.exponents().iter().enumerate() {
                match e {
                    0 => {}
                    1 => write!(f, "*x{}", j + 1)?,
                    _ => write!(f, "*x{}^{e}", j + 1)?,
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TermJson {
    exp: Vec<u32>,
    coef: f64,
}

#[derive(Serialize, Deserialize)]
struct PolynomialJson {
    dim: usize,
    degree: usize,
    terms: Vec<TermJson>,
}

impl TryFrom<PolynomialJson> for Polynomial {
    type Error = Error;

    fn try_from(j: PolynomialJson) -> Result<Self> {
        Polynomial::new(
            j.dim,
            j.degree,
            j.terms.into_iter().map(|t| (MultiIndex(t.exp), t.coef)),
        )
    }
}

impl From<Polynomial> for PolynomialJson {
    fn from(p: Polynomial) -> Self {
        PolynomialJson {
            dim: p.dim,
            degree: p.degree,
            terms: p
                .terms
                .into_iter()
                .map(|(k, coef)| TermJson { exp: k.0, coef })
                .collect(),
        }
    }
}

/// The two regression targets used in the experiments:
/// `f1(x) = x1^2 + x2^2` on `R^2` and
/// `f2(x) = x1^5 + 3x2^4 + 2x3^3 + 5x3x4 + 3x5^2 + 2x6x7x8 + 2x9` on `R^10`.
pub fn builtin_targets() -> (Polynomial, Polynomial) {
    (target_f1(), target_f2())
}

/// The two benchmark targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinTarget {
    F1,
    F2,
}

impl BuiltinTarget {
    pub fn polynomial(self) -> Polynomial {
        match self {
            BuiltinTarget::F1 => target_f1(),
            BuiltinTarget::F2 => target_f2(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BuiltinTarget::F1 => "f1",
            BuiltinTarget::F2 => "f2",
        }
    }
}

impl std::str::FromStr for BuiltinTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(BuiltinTarget::F1),
            "f2" => Ok(BuiltinTarget::F2),
            other => Err(Error::InvalidInput(format!("unknown target {other:?}"))),
        }
    }
}

pub fn target_f1() -> Polynomial {
    let mono = |e: [u32; 2]| MultiIndex(e.to_vec());
    Polynomial::new(2, 2, [(mono([2, 0]), 1.0), (mono([0, 2]), 1.0)]).expect("valid f1")
}

pub fn target_f2() -> Polynomial {
    let mono = |pairs: &[(usize, u32)]| {
        let mut e = vec![0u32; 10];
        for &(var, pow) in pairs {
            e[var - 1] = pow;
        }
        MultiIndex(e)
    };
    Polynomial::new(
        10,
        5,
        [
            (mono(&[(1, 5)]), 1.0),
            (mono(&[(2, 4)]), 3.0),
            (mono(&[(3, 3)]), 2.0),
            (mono(&[(3, 1), (4, 1)]), 5.0),
            (mono(&[(5, 2)]), 3.0),
            (mono(&[(6, 1), (7, 1), (8, 1)]), 2.0),
            (mono(&[(9, 1)]), 2.0),
        ],
    )
    .expect("valid f2")
}
