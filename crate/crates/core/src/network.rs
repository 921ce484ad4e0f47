//! Forward and reverse passes of the attention model.
//!
//! Two forward paths share one contract. [`forward`] runs every block on its
//! dense weights (the reference). [`forward_fast`] only touches the value
//! rows of each token (row 0, the power rows and the constant row): the query
//! and key of token `i` have just two non-zeros, so the score of `(i, j)` is
//! `a_i b_j + C [i = j]` and the best off-diagonal key follows from the two
//! largest and two smallest `b_j`. Only when an off-diagonal score reaches the
//! diagonal one does the fast path scan the full row, so both paths select the
//! same index under the lowest-index tie rule.
//!
//! Gradients are taken with the hardmax selection frozen: the selected score
//! passes its derivative through, all other scores get none.

use rayon::prelude::*;
use serde::Serialize;

use crate::constructor::{apply_dense, materialize, EncoderBlockSpec, TransformerModel};
use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};

/// Token vectors as columns of an `(n + q + 2) x n` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    n: usize,
    q: usize,
    data: DenseMatrix,
}

impl TokenMatrix {
    pub fn from_matrix(n: usize, q: usize, data: DenseMatrix) -> Result<Self> {
        if data.shape() != (n + q + 2, n) {
            return Err(Error::ShapeMismatch {
                expected_rows: n + q + 2,
                expected_cols: n,
                rows: data.rows(),
                cols: data.cols(),
            });
        }
        Ok(TokenMatrix { n, q, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.data
    }

    /// Entry at `row` of token `token`.
    pub fn get(&self, row: usize, token: usize) -> f64 {
        self.data.get(row, token)
    }

    /// Power slot `s` (1-based) of every token.
    pub fn power_row(&self, s: usize) -> Vec<f64> {
        self.data.row(self.n + s).to_vec()
    }

    /// Whether the one-hot rows and the constant row have their embedded values.
    pub fn has_token_structure(&self) -> bool {
        (0..self.n).all(|i| {
            (1..=self.n).all(|r| self.get(r, i) == if r == i + 1 { 1.0 } else { 0.0 })
                && self.get(self.n + self.q + 1, i) == 1.0
        })
    }
}

fn check_input(m: &TransformerModel, x: &[f64]) -> Result<()> {
    if x.len() != m.d {
        return Err(Error::DimensionMismatch {
            expected: m.d,
            got: x.len(),
        });
    }
    Ok(())
}

/// Column `i` = `[<F_i, x>; e_i; 0 (q times); 1]`.
pub fn embed(m: &TransformerModel, x: &[f64]) -> Result<TokenMatrix> {
    check_input(m, x)?;
    let (n, q) = (m.n, m.q);
    let mut z = DenseMatrix::zeros(n + q + 2, n);
    for i in 0..n {
        z.set(0, i, dot(m.embedding_row(i), x));
        z.set(i + 1, i, 1.0);
        z.set(n + q + 1, i, 1.0);
    }
    TokenMatrix::from_matrix(n, q, z)
}

/// Index of the first maximal entry.
pub fn hardmax_index(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Keeps the largest entry (the first one on ties) and zeroes the rest.
pub fn hardmax(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    if !v.is_empty() {
        let j = hardmax_index(v);
        out[j] = v[j];
    }
    out
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Token matrix after the embedding and after every block.
    pub states: Vec<TokenMatrix>,
    /// Selected key index of every token, per block.
    pub selections: Vec<Vec<usize>>,
    pub output: f64,
}

fn readout(m: &TransformerModel, row_value: impl Fn(usize, usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..m.n {
        for s in 1..=m.q {
            acc += m.readout_weight(k, s) * row_value(k, s);
        }
    }
    acc + m.bias
}

/// Reference forward pass on the materialized block weights.
pub fn forward(m: &TransformerModel, x: &[f64]) -> Result<f64> {
    Ok(forward_trace(m, x)?.output)
}

pub fn forward_trace(m: &TransformerModel, x: &[f64]) -> Result<ForwardTrace> {
    let mut z = embed(m, x)?;
    let mut states = vec![z.clone()];
    let mut selections = Vec::with_capacity(m.q);
    for spec in &m.blocks {
        let dense = materialize(spec);
        let (next, sel) = apply_dense(&dense, spec, &z)?;
        z = next;
        states.push(z.clone());
        selections.push(sel);
    }
    let output = readout(m, |k, s| z.get(m.n + s, k));
    Ok(ForwardTrace {
        states,
        selections,
        output,
    })
}

/// One line of a trace dump.
#[derive(Clone, Debug, Serialize)]
pub struct TraceRecord {
    pub block: usize,
    pub selections: Vec<usize>,
    /// `power_slots[k][s - 1]` after this block.
    pub power_slots: Vec<Vec<f64>>,
}

/// JSON lines, one record per block.
pub fn trace_json_lines(trace: &ForwardTrace) -> Result<String> {
    let mut out = String::new();
    for (b, sel) in trace.selections.iter().enumerate() {
        let z = &trace.states[b + 1];
        let record = TraceRecord {
            block: b + 1,
            selections: sel.clone(),
            power_slots: (0..z.n())
                .map(|k| (1..=z.q()).map(|s| z.get(z.n() + s, k)).collect())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    Ok(out)
}

/// The value rows of every token: row 0, the `q` power rows and the
/// constant row, indexed `0..q + 2`. One-hot rows are implicit.
#[derive(Clone, Debug)]
struct ValueRows {
    rows: Vec<Vec<f64>>,
}

fn value_index(spec: &EncoderBlockSpec, row: usize) -> usize {
    if row == 0 {
        0
    } else {
        row - spec.n
    }
}

/// What the backward pass needs from one block.
#[derive(Clone, Debug)]
struct BlockCache {
    a: Vec<f64>,
    b: Vec<f64>,
    selections: Vec<usize>,
    /// Write-row value after attention, before the feed-forward layer.
    z_hat: Vec<f64>,
}

/// Largest and second-largest entries with their indices, lowest index
/// first on ties. `better(x, y)` is the strict ordering.
fn top_two(v: &[f64], better: impl Fn(f64, f64) -> bool) -> [(usize, f64); 2] {
    let mut first = (0, v[0]);
    let mut second: Option<(usize, f64)> = None;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if better(x, first.1) {
            second = Some(first);
            first = (j, x);
        } else if second.is_none_or(|s| better(x, s.1)) {
            second = Some((j, x));
        }
    }
    [first, second.unwrap_or(first)]
}

/// Hardmax selection for every token without forming the score matrix.
/// Returns `(selected index, selected score)` per token.
fn select_fast(a: &[f64], b: &[f64], sep: f64) -> Vec<(usize, f64)> {
    let n = a.len();
    let hi = top_two(b, |x, y| x > y);
    let lo = top_two(b, |x, y| x < y);
    let scan = |i: usize| {
        let mut best = (0, if i == 0 { a[0] * b[0] + sep } else { a[i] * b[0] });
        for j in 1..n {
            let s = if j == i { a[i] * b[j] + sep } else { a[i] * b[j] };
            if s > best.1 {
                best = (j, s);
            }
        }
        best
    };
    (0..n)
        .map(|i| {
            let diag = a[i] * b[i] + sep;
            if n == 1 {
                return (0, diag);
            }
            let extreme = if a[i] >= 0.0 { hi } else { lo };
            let j = if extreme[0].0 != i { extreme[0].0 } else { extreme[1].0 };
            let off = a[i] * b[j];
            if diag > off {
                (i, diag)
            } else {
                scan(i)
            }
        })
        .collect()
}

fn ffn_write(z_hat: f64, sep: f64) -> f64 {
    let h1 = z_hat.max(0.0);
    let h2 = (-z_hat).max(0.0);
    z_hat + (-2.0 * h1 + 2.0 * h2) + sep
}

fn run_fast(m: &TransformerModel, x: &[f64], mut caches: Option<&mut Vec<BlockCache>>) -> ValueRows {
    let n = m.n;
    let mut rows = vec![vec![0.0; n]; m.q + 2];
    for (k, t) in rows[0].iter_mut().enumerate() {
        *t = dot(m.embedding_row(k), x);
    }
    rows[m.q + 1].fill(1.0);
    for spec in &m.blocks {
        let ai = value_index(spec, spec.a_slot);
        let bi = value_index(spec, spec.b_slot);
        let wi = value_index(spec, spec.write_slot);
        let picks = select_fast(&rows[ai], &rows[bi], spec.sep_const);
        let z_hat: Vec<f64> = rows[wi].iter().zip(&picks).map(|(z, p)| z + p.1).collect();
        for (slot, &zh) in rows[wi].iter_mut().zip(&z_hat) {
            *slot = ffn_write(zh, spec.sep_const);
        }
        if let Some(c) = caches.as_deref_mut() {
            c.push(BlockCache {
                a: rows[ai].clone(),
                b: rows[bi].clone(),
                selections: picks.iter().map(|p| p.0).collect(),
                z_hat,
            });
        }
    }
    // the cached factor rows must be the pre-block values; only the write row
    // changes within a block and it never aliases a factor row
    ValueRows { rows }
}

/// Structured forward pass: `O(n q)` per sample after the embedding.
pub fn forward_fast(m: &TransformerModel, x: &[f64]) -> Result<f64> {
    check_input(m, x)?;
    let v = run_fast(m, x, None);
    Ok(readout(m, |k, s| v.rows[s][k]))
}

#[derive(Clone, Debug)]
pub struct FastTrace {
    pub selections: Vec<Vec<usize>>,
    /// `powers[s - 1][k]` after all blocks.
    pub powers: Vec<Vec<f64>>,
    pub output: f64,
}

pub fn forward_fast_trace(m: &TransformerModel, x: &[f64]) -> Result<FastTrace> {
    check_input(m, x)?;
    let mut caches = Vec::with_capacity(m.q);
    let v = run_fast(m, x, Some(&mut caches));
    let output = readout(m, |k, s| v.rows[s][k]);
    Ok(FastTrace {
        selections: caches.into_iter().map(|c| c.selections).collect(),
        powers: v.rows[1..=m.q].to_vec(),
        output,
    })
}

/// Gradients of the trainable parameters, shaped like the model's.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    /// `n x d` row-major.
    pub d_embedding: Vec<f64>,
    /// `n x q`, same layout as the readout.
    pub d_readout: Vec<f64>,
    pub d_bias: f64,
}

impl GradientSet {
    pub fn zeros_like(m: &TransformerModel) -> Self {
        GradientSet {
            d_embedding: vec![0.0; m.n * m.d],
            d_readout: vec![0.0; m.n * m.q],
            d_bias: 0.0,
        }
    }

    fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.d_embedding.iter_mut().zip(&other.d_embedding) {
            *a += b;
        }
        for (a, b) in self.d_readout.iter_mut().zip(&other.d_readout) {
            *a += b;
        }
        self.d_bias += other.d_bias;
    }

    pub fn norm_sq(&self) -> f64 {
        self.d_embedding
            .iter()
            .chain(&self.d_readout)
            .map(|v| v * v)
            .sum::<f64>()
            + self.d_bias * self.d_bias
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.d_embedding.iter_mut().chain(self.d_readout.iter_mut()) {
            *v *= factor;
        }
        self.d_bias *= factor;
    }
}

/// Accumulates `scale * d output / d params` for one sample into `g`;
/// returns the prediction.
fn accumulate_sample(m: &TransformerModel, x: &[f64], y: f64, inv_batch: f64, g: &mut GradientSet) -> f64 {
    let mut caches = Vec::with_capacity(m.q);
    let v = run_fast(m, x, Some(&mut caches));
    let pred = readout(m, |k, s| v.rows[s][k]);
    let dy = 2.0 * (pred - y) * inv_batch;

    g.d_bias += dy;
    let mut grad = vec![vec![0.0; m.n]; m.q + 2];
    for k in 0..m.n {
        for s in 1..=m.q {
            g.d_readout[k * m.q + s - 1] += dy * v.rows[s][k];
            grad[s][k] = dy * m.readout_weight(k, s);
        }
    }
    for (spec, cache) in m.blocks.iter().zip(&caches).rev() {
        let ai = value_index(spec, spec.a_slot);
        let bi = value_index(spec, spec.b_slot);
        let wi = value_index(spec, spec.write_slot);
        for i in 0..m.n {
            // d/dz of z + (-2 relu(z) + 2 relu(-z)), with relu'(0) = 0
            let slope = if cache.z_hat[i] != 0.0 { -1.0 } else { 1.0 };
            let delta = grad[wi][i] * slope;
            grad[wi][i] = delta;
            let j = cache.selections[i];
            grad[ai][i] += delta * cache.b[j];
            grad[bi][j] += delta * cache.a[i];
        }
    }
    for k in 0..m.n {
        let gt = grad[0][k];
        if gt != 0.0 {
            for (dst, xv) in g.d_embedding[k * m.d..(k + 1) * m.d].iter_mut().zip(x) {
                *dst += gt * xv;
            }
        }
    }
    pred
}

/// Samples per work unit; fixed so the reduction order never depends on the
/// thread count.
const GRAD_CHUNK: usize = 32;

/// Gradient of the batch mean squared error and the error itself.
pub fn backward(m: &TransformerModel, xs: &[Vec<f64>], ys: &[f64]) -> Result<(GradientSet, f64)> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "batch has {} inputs and {} targets",
            xs.len(),
            ys.len()
        )));
    }
    if let Some(bad) = xs.iter().find(|x| x.len() != m.d) {
        return Err(Error::DimensionMismatch {
            expected: m.d,
            got: bad.len(),
        });
    }
    let inv = 1.0 / xs.len() as f64;
    let partials: Vec<(GradientSet, f64)> = xs
        .par_chunks(GRAD_CHUNK)
        .zip(ys.par_chunks(GRAD_CHUNK))
        .map(|(xc, yc)| {
            let mut g = GradientSet::zeros_like(m);
            let mut sse = 0.0;
            for (x, &y) in xc.iter().zip(yc) {
                let pred = accumulate_sample(m, x, y, inv, &mut g);
                sse += (pred - y) * (pred - y);
            }
            (g, sse)
        })
        .collect();
    let mut total = GradientSet::zeros_like(m);
    let mut sse = 0.0;
    for (g, s) in &partials {
        total.add_assign(g);
        sse += s;
    }
    Ok((total, sse * inv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hardmax_examples() {
        assert_eq!(hardmax(&[3.0, 1.0, 2.0]), vec![3.0, 0.0, 0.0]);
        assert_eq!(hardmax(&[2.0, 2.0]), vec![2.0, 0.0]);
        assert_eq!(hardmax(&[-1.0, -3.0]), vec![-1.0, 0.0]);
        assert_eq!(hardmax_index(&[1.0, 5.0, 5.0]), 1);
    }

    #[test]
    fn embed_examples() {
        let m = TransformerModel::from_embedding(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1, 1.0).unwrap();
        let z = embed(&m, &[3.0, 4.0]).unwrap();
        assert_eq!((z.get(0, 0), z.get(0, 1)), (3.0, 4.0));
        assert!(z.has_token_structure());

        let z = embed(&m, &[0.0, 0.0]).unwrap();
        assert_eq!((z.get(0, 0), z.get(0, 1)), (0.0, 0.0));
        assert!(z.has_token_structure());

        let m = TransformerModel::from_embedding(
            &[vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, 1.0]],
            2,
            2.0,
        )
        .unwrap();
        let z = embed(&m, &[1.0, 1.0]).unwrap();
        assert!((z.get(0, 0) - 1.4).abs() < 1e-15);
        assert_eq!((z.get(0, 1), z.get(0, 2)), (1.0, 1.0));
        assert!(embed(&m, &[1.0]).is_err());
    }

    #[test]
    fn cascade_by_hand() {
        let m = TransformerModel::from_embedding(&[vec![0.6, 0.8]], 2, 2.0).unwrap();
        let trace = forward_trace(&m, &[1.0, 1.0]).unwrap();
        // t = 1.4, block 1 stores -t, block 2 stores t^2
        assert!((trace.states[1].get(2, 0) + 1.4).abs() < 1e-12);
        assert!((trace.states[2].get(3, 0) - 1.96).abs() < 1e-12);
        let fast = forward_fast_trace(&m, &[1.0, 1.0]).unwrap();
        assert_eq!(fast.powers[0][0], trace.states[2].get(2, 0));
        assert_eq!(fast.powers[1][0], trace.states[2].get(3, 0));
    }

    #[test]
    fn zero_readout_outputs_bias() {
        let mut m = TransformerModel::random_init(3, 2, 6, 2.0, 5).unwrap();
        m.bias = -1.25;
        for x in [[0.0, 0.0, 0.0], [1.0, -2.0, 3.0], [50.0, 0.1, -7.0]] {
            assert_eq!(forward(&m, &x).unwrap(), -1.25);
            assert_eq!(forward_fast(&m, &x).unwrap(), -1.25);
        }
    }

    #[test]
    fn top_two_tie_order() {
        let v = [1.0, 3.0, 3.0, 0.0];
        let hi = top_two(&v, |x, y| x > y);
        assert_eq!((hi[0].0, hi[1].0), (1, 2));
        let lo = top_two(&v, |x, y| x < y);
        assert_eq!((lo[0].0, lo[1].0), (3, 0));
    }

    #[test]
    fn fast_selection_matches_scan_when_off_diagonal_wins() {
        // a_0 b_1 = 100 dominates the diagonal 1 + 1
        let a = [10.0, 1.0, -10.0];
        let b = [1.0, 10.0, -10.0];
        let picks = select_fast(&a, &b, 1.0);
        assert_eq!(picks[0], (1, 100.0));
        assert_eq!(picks[2], (2, 101.0));
        let scores = |i: usize| -> Vec<f64> {
            (0..3).map(|j| a[i] * b[j] + if i == j { 1.0 } else { 0.0 }).collect()
        };
        for (i, p) in picks.iter().enumerate() {
            assert_eq!(p.0, hardmax_index(&scores(i)));
        }
    }

    #[test]
    fn bias_gradient_and_readout_gradient_on_zero_readout() {
        let mut m = TransformerModel::random_init(2, 2, 3, 10.0, 1).unwrap();
        m.bias = 0.5;
        let xs = vec![vec![1.0, 2.0], vec![-0.5, 0.25], vec![3.0, -1.0]];
        let ys = vec![1.0, -2.0, 0.0];
        let (g, mse) = backward(&m, &xs, &ys).unwrap();
        let resid: Vec<f64> = ys.iter().map(|y| 0.5 - y).collect();
        let mean = |f: &dyn Fn(usize) -> f64| (0..3).map(f).sum::<f64>() / 3.0;
        assert!((g.d_bias - 2.0 * mean(&|i| resid[i])).abs() < 1e-14);
        assert!((mse - mean(&|i| resid[i] * resid[i])).abs() < 1e-14);
        for k in 0..3 {
            for s in 1..=2 {
                let slot = |i: usize| forward_fast_trace(&m, &xs[i]).unwrap().powers[s - 1][k];
                let want = 2.0 * mean(&|i| resid[i] * slot(i));
                assert!((g.d_readout[k * 2 + s - 1] - want).abs() < 1e-12);
            }
        }
        assert!(g.d_embedding.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_bad_batches() {
        let m = TransformerModel::random_init(2, 1, 2, 1.0, 0).unwrap();
        assert!(backward(&m, &[vec![1.0, 2.0]], &[]).is_err());
        assert!(backward(&m, &[vec![1.0]], &[0.0]).is_err());
    }
}
