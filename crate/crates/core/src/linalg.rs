//! Small dense linear algebra.
//!
//! [`PivotedQr`] gives the ridge solver what it needs: a rank estimate from
//! the pivoted diagonal of `R`, and the minimum-norm solution of a
//! full-row-rank system `A x = c` from the factorization of `A^T`.
//! [`DenseMatrix`] backs the reference (fully materialized) block path.

use rayon::prelude::*;

/// `A P = Q R` for an `m x n` matrix held as `n` columns of length `m`.
#[derive(Clone, Debug)]
pub struct PivotedQr {
    m: usize,
    /// Column `i` holds `R[..=i, i]` above and on the diagonal and the tail
    /// of the `i`-th Householder vector (implicit leading 1) below it.
    cols: Vec<Vec<f64>>,
    tau: Vec<f64>,
    perm: Vec<usize>,
}

impl PivotedQr {
    pub fn new(mut cols: Vec<Vec<f64>>, m: usize) -> Self {
        assert!(cols.iter().all(|c| c.len() == m), "ragged columns");
        let n = cols.len();
        let k = m.min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
        let mut tau = vec![0.0; k];

        for i in 0..k {
            let p = (i..n)
                .max_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(b.cmp(&a)))
                .unwrap();
            cols.swap(i, p);
            norms.swap(i, p);
            perm.swap(i, p);

            let (head, tail) = cols.split_at_mut(i + 1);
            let col = &mut head[i];
            let alpha = col[i];
            let norm_x = col[i..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm_x == 0.0 {
                tau[i] = 0.0;
                continue;
            }
            let beta = if alpha >= 0.0 { -norm_x } else { norm_x };
            let scale = 1.0 / (alpha - beta);
            for v in &mut col[i + 1..] {
                *v *= scale;
            }
            col[i] = beta;
            let t = (beta - alpha) / beta;
            tau[i] = t;

            let v_tail = &col[i + 1..];
            tail.par_iter_mut()
                .zip(norms[i + 1..].par_iter_mut())
                .for_each(|(c, norm)| {
                    let w = c[i] + dot(v_tail, &c[i + 1..]);
                    let tw = t * w;
                    c[i] -= tw;
                    for (cv, vv) in c[i + 1..].iter_mut().zip(v_tail) {
                        *cv -= tw * vv;
                    }
                    *norm = c[i + 1..].iter().map(|v| v * v).sum();
                });
        }
        PivotedQr { m, cols, tau, perm }
    }

    /// Diagonal of `R` in pivot order.
    pub fn r_diagonal(&self) -> Vec<f64> {
        (0..self.tau.len()).map(|i| self.cols[i][i]).collect()
    }

    /// Number of diagonal entries of `R` above `rel_tol * |R_00|`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let diag = self.r_diagonal();
        let Some(first) = diag.first().map(|d| d.abs()) else {
            return 0;
        };
        if first == 0.0 {
            return 0;
        }
        diag.iter().filter(|d| d.abs() > rel_tol * first).count()
    }

    pub fn nrows(&self) -> usize {
        self.m
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    /// Treating this as the factorization of `A^T` (so `A` is `ncols x m`
    /// with full row rank), returns the minimum-norm `x` with `A x = c`.
    ///
    /// `P^T A = R^T Q^T`, so `x = Q y` with `R^T y = P^T c`.
    pub fn solve_transposed_min_norm(&self, c: &[f64]) -> Vec<f64> {
        let r = self.ncols();
        assert_eq!(c.len(), r);
        assert!(r <= self.m, "system must be underdetermined or square");
        let mut y = vec![0.0; self.m];
        for i in 0..r {
            let s = dot(&self.cols[i][..i], &y[..i]);
            y[i] = (c[self.perm[i]] - s) / self.cols[i][i];
        }
        for i in (0..r).rev() {
            let v_tail = &self.cols[i][i + 1..];
            let w = y[i] + dot(v_tail, &y[i + 1..]);
            let tw = self.tau[i] * w;
            y[i] -= tw;
            for (yv, vv) in y[i + 1..].iter_mut().zip(v_tail) {
                *yv -= tw * vv;
            }
        }
        y
    }
}

/// Row-major dense matrix with a fixed-order naive product, used by the
/// reference forward path.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        DenseMatrix {
            rows: r,
            cols: c,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn count_nonzeros(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// `self * rhs`, accumulating each entry left to right over the inner index.
    pub fn matmul(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * rhs.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "inner dimensions differ");
        (0..self.rows)
            .map(|i| {
                let mut acc = 0.0;
                for (a, b) in self.row(i).iter().zip(v) {
                    acc += a * b;
                }
                acc
            })
            .collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
