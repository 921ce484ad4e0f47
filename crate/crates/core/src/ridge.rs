//! Ridge-power decomposition of polynomials.
//!
//! Any `Q` of degree at most `q` on `R^d` can be written as
//!
//! ```text
//! Q(x) = Q(0) + sum_{k=1}^{n_q} sum_{s=1}^{q} beta_{k,s} (xi_k . x)^s,   n_q = C(d-1+q, q)
//! ```
//!
//! for a suitable set of unit directions `xi_k`. The directions are drawn
//! uniformly on the sphere from a seeded generator and accepted only once a
//! rank certificate confirms they span every homogeneous degree.
//!
//! By the multinomial theorem `(xi . x)^s = sum_{|a|=s} multinomial(s; a) xi^a x^a`,
//! so the expansion matrix is block diagonal in the degree: a degree-`s`
//! monomial row only meets columns of power `s`. Every degree block is
//! factored and solved independently.

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::PivotedQr;
use crate::polynomials::{dim_homogeneous, homogeneous_indices, nonconstant_indices, MultiIndex, Polynomial};

pub const MAX_BASIS_ATTEMPTS: u32 = 16;
/// Relative pivot threshold of the rank certificate.
pub const RANK_TOL: f64 = 1e-10;
/// Reconstruction tolerance, scaled by `1 + max |coef|`.
pub const DECOMPOSE_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RidgeBasis {
    pub dim: usize,
    pub degree: usize,
    pub seed: u64,
    pub xi: Vec<Vec<f64>>,
    #[serde(skip)]
    certificate: OnceLock<Arc<Certificate>>,
}

/// Pivoted QR of the transpose of every degree block, `s = 1..=q`.
#[derive(Debug)]
struct Certificate {
    blocks: Vec<PivotedQr>,
    ranks: Vec<usize>,
}

impl PartialEq for RidgeBasis {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.degree == other.degree && self.seed == other.seed && self.xi == other.xi
    }
}

impl RidgeBasis {
    /// Wraps explicit unit directions; fails if they do not span.
    pub fn from_directions(dim: usize, degree: usize, xi: Vec<Vec<f64>>) -> Result<Self> {
        let basis = RidgeBasis {
            dim,
            degree,
            seed: 0,
            xi,
            certificate: OnceLock::new(),
        };
        basis.validate()?;
        if !basis.spans() {
            return Err(Error::RankDeficient {
                dim,
                degree,
                attempts: 1,
            });
        }
        Ok(basis)
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.degree == 0 {
            return Err(Error::InvalidInput("ridge basis needs d >= 1 and q >= 1".into()));
        }
        let n_q = dim_homogeneous(self.dim, self.degree)? as usize;
        if self.xi.len() != n_q {
            return Err(Error::InvalidInput(format!(
                "expected {n_q} ridge directions, got {}",
                self.xi.len()
            )));
        }
        for v in &self.xi {
            if v.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: v.len(),
                });
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("direction has norm {norm}, expected 1")));
            }
        }
        Ok(())
    }

    fn certificate(&self) -> &Certificate {
        self.certificate.get_or_init(|| {
            let blocks: Vec<PivotedQr> = (1..=self.degree)
                .map(|s| {
                    let rows = homogeneous_indices(self.dim, s);
                    PivotedQr::new(block_transpose(&self.xi, &rows), self.xi.len())
                })
                .collect();
            let ranks = blocks.iter().map(|qr| qr.rank(RANK_TOL)).collect();
            Arc::new(Certificate { blocks, ranks })
        })
    }

    /// Numerical rank of each degree block, `s = 1..=q`.
    pub fn block_ranks(&self) -> Vec<usize> {
        self.certificate().ranks.clone()
    }

    /// Whether every degree block has full row rank, i.e. the powers
    /// `(xi_k . x)^s` span all non-constant monomials of degree `<= q`.
    pub fn spans(&self) -> bool {
        self.certificate()
            .ranks
            .iter()
            .enumerate()
            .all(|(i, &r)| Some(r as u64) == dim_homogeneous(self.dim, i + 1).ok())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: RidgeBasis = serde_json::from_str(s)?;
        b.validate()?;
        Ok(b)
    }
}

/// Draws `n_q` uniform unit vectors from `seed`, retrying with `seed + 1`,
/// `seed + 2`, ... until the rank certificate passes.
pub fn generate_basis(d: usize, q: usize, seed: u64) -> Result<RidgeBasis> {
    if d == 0 || q == 0 {
        return Err(Error::InvalidInput("ridge basis needs d >= 1 and q >= 1".into()));
    }
    let n_q = dim_homogeneous(d, q)? as usize;
    for attempt in 0..MAX_BASIS_ATTEMPTS {
        let attempt_seed = seed.wrapping_add(attempt as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);
        let xi = (0..n_q).map(|_| random_unit_vector(&mut rng, d)).collect();
        let basis = RidgeBasis {
            dim: d,
            degree: q,
            seed: attempt_seed,
            xi,
            certificate: OnceLock::new(),
        };
        if basis.spans() {
            return Ok(basis);
        }
    }
    Err(Error::RankDeficient {
        dim: d,
        degree: q,
        attempts: MAX_BASIS_ATTEMPTS,
    })
}

/// Uniform on the unit sphere in `R^d` (normalized Gaussian).
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-300 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

/// `multinomial(s; a) * prod_j xi_j^{a_j}`.
fn ridge_entry(idx: &MultiIndex, xi: &[f64]) -> f64 {
    idx.multinomial() * idx.eval(xi)
}

/// The degree block transposed: one column per monomial, one row per direction.
fn block_transpose(xi: &[Vec<f64>], rows: &[MultiIndex]) -> Vec<Vec<f64>> {
    rows.par_iter()
        .map(|idx| {
            let m = idx.multinomial();
            xi.iter().map(|v| m * idx.eval(v)).collect()
        })
        .collect()
}

/// Rows: non-constant monomials of degree `<= q` in graded-lex order.
/// Columns: `(k, s)` pairs ordered power-major, column `(s - 1) * n_q + k`.
pub fn expansion_matrix(basis: &RidgeBasis) -> Vec<Vec<f64>> {
    let n_q = basis.len();
    let rows = nonconstant_indices(basis.dim, basis.degree);
    rows.par_iter()
        .map(|idx| {
            let s = idx.degree();
            let mut row = vec![0.0; n_q * basis.degree];
            for (k, v) in basis.xi.iter().enumerate() {
                row[(s - 1) * n_q + k] = ridge_entry(idx, v);
            }
            row
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeCoefficients {
    /// `Q(0)`.
    pub constant: f64,
    /// `beta[k][s - 1]`.
    pub beta: Vec<Vec<f64>>,
}

impl RidgeCoefficients {
    pub fn zeros(n_q: usize, q: usize) -> Self {
        RidgeCoefficients {
            constant: 0.0,
            beta: vec![vec![0.0; q]; n_q],
        }
    }

    /// `beta_{k,s}` with `k` 0-based and `s` in `1..=q`.
    pub fn get(&self, k: usize, s: usize) -> f64 {
        self.beta[k][s - 1]
    }

    pub fn eval(&self, basis: &RidgeBasis, x: &[f64]) -> f64 {
        let mut acc = self.constant;
        for (xi, row) in basis.xi.iter().zip(&self.beta) {
            let t: f64 = xi.iter().zip(x).map(|(a, b)| a * b).sum();
            let mut pow = 1.0;
            for b in row {
                pow *= t;
                acc += b * pow;
            }
        }
        acc
    }
}

/// Solves for the minimum-norm `beta` reproducing `p - p(0)` exactly and
/// certifies the result by re-expanding it.
pub fn ridge_decompose(p: &Polynomial, basis: &RidgeBasis) -> Result<RidgeCoefficients> {
    if p.dim() != basis.dim {
        return Err(Error::DimensionMismatch {
            expected: basis.dim,
            got: p.dim(),
        });
    }
    if p.actual_degree() > basis.degree {
        return Err(Error::InvalidInput(format!(
            "polynomial degree {} exceeds basis degree {}",
            p.actual_degree(),
            basis.degree
        )));
    }
    let n_q = basis.len();
    let q = basis.degree;
    let cert = basis.certificate();
    let mut coefs = RidgeCoefficients::zeros(n_q, q);
    coefs.constant = p.constant_term();

    for s in 1..=q {
        let rows = homogeneous_indices(basis.dim, s);
        let rhs: Vec<f64> = rows.iter().map(|idx| p.coefficient(idx)).collect();
        if rhs.iter().all(|&c| c == 0.0) {
            continue;
        }
        if cert.ranks[s - 1] < rows.len() {
            return Err(Error::RankDeficient {
                dim: basis.dim,
                degree: q,
                attempts: 1,
            });
        }
        let sol = cert.blocks[s - 1].solve_transposed_min_norm(&rhs);
        for (k, b) in sol.into_iter().enumerate() {
            coefs.beta[k][s - 1] = b;
        }
    }

    let recon = reconstruct(&coefs, basis)?;
    let residual = recon.max_coef_diff(p);
    let tolerance = DECOMPOSE_TOL * (1.0 + p.max_abs_coef());
    if residual.is_nan() || residual >= tolerance {
        return Err(Error::Decomposition {
            residual,
            tolerance,
        });
    }
    Ok(coefs)
}

/// Multiplies `constant + sum beta_{k,s} (xi_k . x)^s` back out into monomials.
pub fn reconstruct(c: &RidgeCoefficients, basis: &RidgeBasis) -> Result<Polynomial> {
    if c.beta.len() != basis.len() || c.beta.iter().any(|r| r.len() != basis.degree) {
        return Err(Error::InvalidInput("coefficient table does not match basis".into()));
    }
    let mut terms = vec![(MultiIndex::zero(basis.dim), c.constant)];
    for s in 1..=basis.degree {
        if c.beta.iter().all(|row| row[s - 1] == 0.0) {
            continue;
        }
        let rows = homogeneous_indices(basis.dim, s);
        let coefs: Vec<f64> = rows
            .par_iter()
            .map(|idx| {
                basis
                    .xi
                    .iter()
                    .zip(&c.beta)
                    .map(|(v, row)| row[s - 1] * ridge_entry(idx, v))
                    .sum()
            })
            .collect();
        terms.extend(rows.into_iter().zip(coefs));
    }
    Polynomial::new(basis.dim, basis.degree, terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polynomials::target_f1;

    fn mono(e: &[u32]) -> MultiIndex {
        MultiIndex::new(e.to_vec())
    }

    #[test]
    fn one_dimensional_basis() {
        let b = generate_basis(1, 3, 7).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.xi[0].len(), 1);
        assert_eq!(b.xi[0][0].abs(), 1.0);
    }

    #[test]
    fn basis_sizes_and_norms() {
        let b = generate_basis(2, 2, 0).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.block_ranks(), vec![2, 3]);
        for v in &b.xi {
            let n: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn expansion_matrix_small_cases() {
        let b = RidgeBasis::from_directions(1, 2, vec![vec![1.0]]).unwrap();
        assert_eq!(expansion_matrix(&b), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let xi = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]];
        let b = RidgeBasis::from_directions(2, 2, xi).unwrap();
        let m = expansion_matrix(&b);
        // rows: x1, x2, x1^2, x1x2, x2^2; columns: s=1 (k=0..3), s=2 (k=0..3)
        assert!((m[3][3 + 2] - 1.0).abs() < 1e-15);
        for row in &m[..2] {
            assert!(row[3..].iter().all(|&v| v == 0.0));
        }
        for row in &m[2..] {
            assert!(row[..3].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn decompose_single_square() {
        let b = RidgeBasis::from_directions(1, 2, vec![vec![1.0]]).unwrap();
        let p = Polynomial::new(1, 2, [(mono(&[2]), 1.0)]).unwrap();
        let c = ridge_decompose(&p, &b).unwrap();
        assert_eq!(c.constant, 0.0);
        assert!(c.get(0, 1).abs() < 1e-15);
        assert!((c.get(0, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decompose_cross_term() {
        // (xi3.x)^2 - (xi1.x)^2/2 - (xi2.x)^2/2 = x1 x2
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let xi = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]];
        let b = RidgeBasis::from_directions(2, 2, xi).unwrap();
        let p = Polynomial::new(2, 2, [(mono(&[1, 1]), 1.0)]).unwrap();
        let c = ridge_decompose(&p, &b).unwrap();
        let expected = [(0, 2, -0.5), (1, 2, -0.5), (2, 2, 1.0), (0, 1, 0.0), (1, 1, 0.0), (2, 1, 0.0)];
        for (k, s, v) in expected {
            assert!((c.get(k, s) - v).abs() < 1e-12, "beta[{k},{s}] = {}", c.get(k, s));
        }
        assert_eq!(c.constant, 0.0);
    }

    #[test]
    fn decompose_constant() {
        let b = generate_basis(3, 2, 1).unwrap();
        let p = Polynomial::new(3, 2, [(MultiIndex::zero(3), 7.0)]).unwrap();
        let c = ridge_decompose(&p, &b).unwrap();
        assert_eq!(c.constant, 7.0);
        assert!(c.beta.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_examples() {
        let b = generate_basis(2, 2, 3).unwrap();
        let f1 = target_f1();
        let back = reconstruct(&ridge_decompose(&f1, &b).unwrap(), &b).unwrap();
        assert!(back.max_coef_diff(&f1) < 1e-8);

        let zero = RidgeCoefficients {
            constant: 2.5,
            beta: vec![vec![0.0; 2]; 3],
        };
        let p = reconstruct(&zero, &b).unwrap();
        assert_eq!(p.term_count(), 1);
        assert_eq!(p.constant_term(), 2.5);

        // hand-built: beta_{1,1} = 1 along (0.6, 0.8); the other directions
        // only need to complete a spanning set
        let xi = vec![vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = RidgeBasis::from_directions(2, 2, xi).unwrap();
        let mut c = RidgeCoefficients::zeros(3, 2);
        c.beta[0][0] = 1.0;
        let p = reconstruct(&c, &b).unwrap();
        assert_eq!(p.term_count(), 2);
        assert!((p.coefficient(&mono(&[1, 0])) - 0.6).abs() < 1e-15);
        assert!((p.coefficient(&mono(&[0, 1])) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let b = generate_basis(2, 2, 0).unwrap();
        let p3 = Polynomial::new(3, 1, [(mono(&[1, 0, 0]), 1.0)]).unwrap();
        assert!(ridge_decompose(&p3, &b).is_err());
        let cubic = Polynomial::new(2, 3, [(mono(&[3, 0]), 1.0)]).unwrap();
        assert!(ridge_decompose(&cubic, &b).is_err());
        let parallel = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            RidgeBasis::from_directions(2, 2, parallel),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn json_round_trip_keeps_certificate_usable() {
        let b = generate_basis(2, 3, 11).unwrap();
        let back = RidgeBasis::from_json(&b.to_json().unwrap()).unwrap();
        assert_eq!(back, b);
        assert!(back.spans());
        let v: serde_json::Value = serde_json::from_str(&b.to_json().unwrap()).unwrap();
        for key in ["dim", "degree", "seed", "xi"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
