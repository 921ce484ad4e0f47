//! Fixed multiplication blocks and the polynomial-to-transformer compiler.
//!
//! Token layout (0-based rows of each `n + q + 2` token vector):
//!
//! ```text
//! row 0            t_i = <F_i, x>
//! rows 1..=n       one-hot position e_i
//! rows n+1..=n+q   power slots, block s writes row n+s
//! row n+q+1        constant 1
//! ```
//!
//! Block `s` multiplies `a_i = t_i` by `b_i` (the constant for `s = 1`, the
//! previous power slot otherwise) and stores `-a_i b_i` in its write row. The
//! query adds `C_s` on the one-hot diagonal so that the hardmax selects each
//! token's own key as long as `C_s > 2 max |a_i b_j|`; the value projection
//! copies the selected score into the write row, and the rectifier pair in the
//! feed-forward layer turns `a_i b_i + C_s` into `-a_i b_i`.
//!
//! Chaining `q` blocks leaves `(-1)^s t_i^s` in row `n+s`, and a sparse readout
//! over those rows reproduces the ridge expansion of the target polynomial.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::network::{hardmax_index, TokenMatrix};
use crate::polynomials::{dim_homogeneous, Polynomial};
use crate::ridge::{generate_basis, random_unit_vector, ridge_decompose, RidgeBasis};

/// One fixed multiplication block. Slots are 0-based token rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlockSpec {
    pub n: usize,
    pub q: usize,
    /// Stage `s` in `1..=q`.
    pub stage: usize,
    /// Row read by the query (first factor).
    pub a_slot: usize,
    /// Row read by the key (second factor).
    pub b_slot: usize,
    pub write_slot: usize,
    /// Separation constant `C_s` added on the query's one-hot diagonal.
    pub sep_const: f64,
}

/// `2 * max(1, B)^(2s)`: strictly dominates `2 |a_i b_j| <= 2 max(1, B)^s`.
pub fn separation_constant(bound: f64, stage: usize) -> f64 {
    2.0 * bound.max(1.0).powi(2 * stage as i32)
}

/// Stage `s` of the power cascade: `a = t_i`, `b` the constant row for
/// `s = 1` and power row `n + s - 1` otherwise, written to row `n + s`.
pub fn build_block(n: usize, q: usize, stage: usize, sep_const: f64) -> Result<EncoderBlockSpec> {
    if stage == 0 || stage > q {
        return Err(Error::InvalidInput(format!("stage {stage} outside 1..={q}")));
    }
    let b_slot = if stage == 1 { n + q + 1 } else { n + stage - 1 };
    EncoderBlockSpec::multiplier(n, q, stage, 0, b_slot, n + stage, sep_const)
}

impl EncoderBlockSpec {
    /// A block computing `-a_i b_i` from arbitrary value rows. The write row
    /// must be a power row distinct from both factor rows.
    pub fn multiplier(
        n: usize,
        q: usize,
        stage: usize,
        a_slot: usize,
        b_slot: usize,
        write_slot: usize,
        sep_const: f64,
    ) -> Result<Self> {
        if n == 0 || q == 0 {
            return Err(Error::InvalidInput("block needs n >= 1 and q >= 1".into()));
        }
        if !(sep_const > 0.0 && sep_const.is_finite()) {
            return Err(Error::InvalidInput(format!("separation constant {sep_const} must be positive")));
        }
        let is_value_row = |r: usize| r == 0 || (n < r && r <= n + q + 1);
        if !is_value_row(a_slot) || !is_value_row(b_slot) {
            return Err(Error::InvalidInput("factor rows must not be one-hot rows".into()));
        }
        if write_slot <= n || write_slot > n + q {
            return Err(Error::InvalidInput(format!("write row {write_slot} is not a power row")));
        }
        if a_slot == write_slot || b_slot == write_slot {
            return Err(Error::InvalidInput("write row must differ from the factor rows".into()));
        }
        Ok(EncoderBlockSpec {
            n,
            q,
            stage,
            a_slot,
            b_slot,
            write_slot,
            sep_const,
        })
    }
}

/// Which matrix of a block an entry belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockPart {
    Query,
    Key,
    Value,
    Ffn1,
    Ffn2,
    Bias2,
}

/// Dense weights of one encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

impl DenseBlock {
    pub fn count_nonzeros(&self) -> usize {
        [&self.wq, &self.wk, &self.wv, &self.w1, &self.w2]
            .iter()
            .map(|m| m.count_nonzeros())
            .sum::<usize>()
            + self.b1.iter().chain(&self.b2).filter(|&&v| v != 0.0).count()
    }
}

impl EncoderBlockSpec {
    pub fn token_len(&self) -> usize {
        self.n + self.q + 2
    }

    pub fn constant_slot(&self) -> usize {
        self.n + self.q + 1
    }

    /// Every structurally non-zero weight as `(part, row, col, value)`.
    pub fn entries(&self) -> Vec<(BlockPart, usize, usize, f64)> {
        let n = self.n;
        let c = self.sep_const;
        let w = self.write_slot;
        let mut out = Vec::with_capacity(2 * n + 8);
        out.push((BlockPart::Query, 0, self.a_slot, 1.0));
        out.extend((1..=n).map(|t| (BlockPart::Query, t, t, c)));
        out.push((BlockPart::Key, 0, self.b_slot, 1.0));
        out.extend((1..=n).map(|t| (BlockPart::Key, t, t, 1.0)));
        out.push((BlockPart::Value, w, self.constant_slot(), 1.0));
        out.push((BlockPart::Ffn1, 0, w, 1.0));
        out.push((BlockPart::Ffn1, 1, w, -1.0));
        out.push((BlockPart::Ffn2, w, 0, -2.0));
        out.push((BlockPart::Ffn2, w, 1, 2.0));
        out.push((BlockPart::Bias2, w, 0, c));
        out
    }

    pub fn count_nonzeros(&self) -> usize {
        self.entries().iter().filter(|e| e.3 != 0.0).count()
    }
}

/// Dense `W^Q, W^K in R^{(n+1) x (n+q+2)}`, `W^V in R^{(n+q+2)^2}`,
/// `W_1 in R^{2 x (n+q+2)}`, `W_2 in R^{(n+q+2) x 2}`, `b_1`, `b_2`.
pub fn materialize(spec: &EncoderBlockSpec) -> DenseBlock {
    let len = spec.token_len();
    let mut block = DenseBlock {
        wq: DenseMatrix::zeros(spec.n + 1, len),
        wk: DenseMatrix::zeros(spec.n + 1, len),
        wv: DenseMatrix::zeros(len, len),
        w1: DenseMatrix::zeros(2, len),
        w2: DenseMatrix::zeros(len, 2),
        b1: vec![0.0; 2],
        b2: vec![0.0; len],
    };
    for (part, r, c, v) in spec.entries() {
        match part {
            BlockPart::Query => block.wq.set(r, c, v),
            BlockPart::Key => block.wk.set(r, c, v),
            BlockPart::Value => block.wv.set(r, c, v),
            BlockPart::Ffn1 => block.w1.set(r, c, v),
            BlockPart::Ffn2 => block.w2.set(r, c, v),
            BlockPart::Bias2 => block.b2[r] = v,
        }
    }
    block
}

/// One block on the dense weights: hardmax self-attention with residual,
/// then the rectifier feed-forward layer with residual, applied per token.
/// Returns the new tokens and the key index each token selected.
pub fn block_apply_reference(
    spec: &EncoderBlockSpec,
    z: &TokenMatrix,
) -> Result<(TokenMatrix, Vec<usize>)> {
    let dense = materialize(spec);
    apply_dense(&dense, spec, z)
}

pub(crate) fn apply_dense(
    dense: &DenseBlock,
    spec: &EncoderBlockSpec,
    z: &TokenMatrix,
) -> Result<(TokenMatrix, Vec<usize>)> {
    let (rows, cols) = z.matrix().shape();
    if rows != spec.token_len() || cols != spec.n {
        return Err(Error::ShapeMismatch {
            expected_rows: spec.token_len(),
            expected_cols: spec.n,
            rows,
            cols,
        });
    }
    let zm = z.matrix();
    let queries = dense.wq.matmul(zm);
    let keys = dense.wk.matmul(zm);
    // scores[i][j] = <q_i, k_j>
    let scores = queries.transpose().matmul(&keys);
    let values = dense.wv.matmul(zm);

    let mut out = zm.clone();
    let mut selections = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let alpha = scores.row(i);
        let j = hardmax_index(alpha);
        selections.push(j);
        let mut weights = vec![0.0; spec.n];
        weights[j] = alpha[j];
        let attended = values.matvec(&weights);
        let z_hat: Vec<f64> = zm.column(i).iter().zip(&attended).map(|(a, b)| a + b).collect();

        let hidden: Vec<f64> = dense
            .w1
            .matvec(&z_hat)
            .iter()
            .zip(&dense.b1)
            .map(|(h, b)| (h + b).max(0.0))
            .collect();
        let ffn = dense.w2.matvec(&hidden);
        for r in 0..rows {
            out.set(r, i, z_hat[r] + ffn[r] + dense.b2[r]);
        }
    }
    Ok((TokenMatrix::from_matrix(spec.n, spec.q, out)?, selections))
}

/// Embedding `F`, `q` fixed blocks, and the sparse readout `beta, b`.
///
/// The readout is supported on the power rows only and is stored densely as
/// `readout[k * q + (s - 1)]`, the weight of token `k`, row `n + s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelJson", into = "ModelJson")]
pub struct TransformerModel {
    pub d: usize,
    pub q: usize,
    pub n: usize,
    /// `F`, `n x d` row-major.
    pub embedding: Vec<f64>,
    pub blocks: Vec<EncoderBlockSpec>,
    pub readout: Vec<f64>,
    pub bias: f64,
    pub input_bound: f64,
}

impl TransformerModel {
    /// A model with the given embedding rows, blocks sized for `input_bound`,
    /// and a zero readout.
    pub fn from_embedding(rows: &[Vec<f64>], q: usize, input_bound: f64) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if n == 0 || d == 0 || q == 0 {
            return Err(Error::InvalidInput("model needs n, d, q >= 1".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        if !(input_bound > 0.0 && input_bound.is_finite()) {
            return Err(Error::InvalidInput(format!("input bound {input_bound} must be positive")));
        }
        let blocks = (1..=q)
            .map(|s| build_block(n, q, s, separation_constant(input_bound, s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformerModel {
            d,
            q,
            n,
            embedding: rows.concat(),
            blocks,
            readout: vec![0.0; n * q],
            bias: 0.0,
            input_bound,
        })
    }

    /// Trainable initialization: `n` embedding rows uniform on the unit
    /// sphere, zero readout and bias.
    pub fn random_init(d: usize, q: usize, n: usize, input_bound: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_unit_vector(&mut rng, d)).collect();
        Self::from_embedding(&rows, q, input_bound)
    }

    pub fn embedding_row(&self, k: usize) -> &[f64] {
        &self.embedding[k * self.d..(k + 1) * self.d]
    }

    /// Readout weight of token `k` (0-based) on power `s` in `1..=q`.
    pub fn readout_weight(&self, k: usize, s: usize) -> f64 {
        self.readout[k * self.q + s - 1]
    }

    pub fn set_readout_weight(&mut self, k: usize, s: usize, w: f64) {
        self.readout[k * self.q + s - 1] = w;
    }

    pub fn token_len(&self) -> usize {
        self.n + self.q + 2
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct BlockJson {
    s: usize,
    c: f64,
    a: usize,
    b: usize,
    w: usize,
}

/// `(token, row, weight)`, both indices 0-based.
#[derive(Serialize, Deserialize)]
struct ReadoutJson(usize, usize, f64);

#[derive(Serialize, Deserialize)]
struct ModelJson {
    d: usize,
    q: usize,
    n: usize,
    embedding: Vec<f64>,
    blocks: Vec<BlockJson>,
    beta: Vec<ReadoutJson>,
    bias: f64,
    input_bound: f64,
}

impl From<TransformerModel> for ModelJson {
    fn from(m: TransformerModel) -> Self {
        let beta = (0..m.n)
            .flat_map(|k| (1..=m.q).map(move |s| (k, s)))
            .filter_map(|(k, s)| {
                let w = m.readout_weight(k, s);
                (w != 0.0).then_some(ReadoutJson(k, m.n + s, w))
            })
            .collect();
        ModelJson {
            d: m.d,
            q: m.q,
            n: m.n,
            blocks: m
                .blocks
                .iter()
                .map(|b| BlockJson {
                    s: b.stage,
                    c: b.sep_const,
                    a: b.a_slot,
                    b: b.b_slot,
                    w: b.write_slot,
                })
                .collect(),
            embedding: m.embedding,
            beta,
            bias: m.bias,
            input_bound: m.input_bound,
        }
    }
}

impl TryFrom<ModelJson> for TransformerModel {
    type Error = Error;

    fn try_from(j: ModelJson) -> Result<Self> {
        if j.embedding.len() != j.n * j.d {
            return Err(Error::InvalidInput("embedding length is not n * d".into()));
        }
        if j.blocks.len() != j.q {
            return Err(Error::InvalidInput("expected one block per stage".into()));
        }
        let blocks = j
            .blocks
            .iter()
            .map(|b| EncoderBlockSpec::multiplier(j.n, j.q, b.s, b.a, b.b, b.w, b.c))
            .collect::<Result<Vec<_>>>()?;
        let mut readout = vec![0.0; j.n * j.q];
        for ReadoutJson(k, row, w) in j.beta {
            if k >= j.n || row <= j.n || row > j.n + j.q {
                return Err(Error::InvalidInput(format!(
                    "readout entry ({k}, {row}) outside the power rows"
                )));
            }
            readout[k * j.q + row - j.n - 1] = w;
        }
        Ok(TransformerModel {
            d: j.d,
            q: j.q,
            n: j.n,
            embedding: j.embedding,
            blocks,
            readout,
            bias: j.bias,
            input_bound: j.input_bound,
        })
    }
}

/// Compiles `p` into a model that reproduces it on `||x|| <= bound`.
/// The degree used is the largest term degree of `p`.
pub fn compile_exact(p: &Polynomial, bound: f64, seed: u64) -> Result<TransformerModel> {
    let q = p.actual_degree();
    if q == 0 {
        return Err(Error::InvalidInput(
            "constant polynomial: no blocks are needed, the readout bias alone represents it".into(),
        ));
    }
    let basis = generate_basis(p.dim(), q, seed)?;
    compile_with_basis(p, bound, &basis)
}

/// Same as [`compile_exact`] with a caller-supplied ridge basis.
pub fn compile_with_basis(p: &Polynomial, bound: f64, basis: &RidgeBasis) -> Result<TransformerModel> {
    let coefs = ridge_decompose(p, basis)?;
    let mut model = TransformerModel::from_embedding(&basis.xi, basis.degree, bound)?;
    for k in 0..model.n {
        for s in 1..=model.q {
            // block s stores (-1)^s t^s
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            model.set_readout_weight(k, s, sign * coefs.get(k, s));
        }
    }
    model.bias = coefs.constant;
    Ok(model)
}

/// `F`, every readout slot `beta_{k,s}` (zero or not) and the bias.
pub fn count_free_params(m: &TransformerModel) -> u64 {
    (m.n * m.d + m.n * m.q) as u64 + 1
}

/// Free parameters plus the non-zero weights of every fixed block.
pub fn count_nonzeros(m: &TransformerModel) -> u64 {
    count_free_params(m) + m.blocks.iter().map(|b| b.count_nonzeros() as u64).sum::<u64>()
}

/// `d^{q+1} + q d^q + 1`.
pub fn free_param_bound(d: usize, q: usize) -> Result<u64> {
    let (dq, dq1) = powers(d, q)?;
    dq1.checked_add((q as u64).checked_mul(dq).ok_or(Error::Overflow("q d^q"))?)
        .and_then(|v| v.checked_add(1))
        .ok_or(Error::Overflow("free parameter bound"))
}

/// `d^{q+1} + 3 q d^q + 8 q + 1`.
pub fn nonzero_bound(d: usize, q: usize) -> Result<u64> {
    let (dq, dq1) = powers(d, q)?;
    let q = q as u64;
    q.checked_mul(3)
        .and_then(|v| v.checked_mul(dq))
        .and_then(|v| v.checked_add(dq1))
        .and_then(|v| v.checked_add(8 * q + 1))
        .ok_or(Error::Overflow("non-zero bound"))
}

fn powers(d: usize, q: usize) -> Result<(u64, u64)> {
    let dq = (d as u64).checked_pow(q as u32).ok_or(Error::Overflow("d^q"))?;
    let dq1 = dq.checked_mul(d as u64).ok_or(Error::Overflow("d^(q+1)"))?;
    Ok((dq, dq1))
}

/// Token count of the compiled model for `(d, q)`.
pub fn token_count(d: usize, q: usize) -> Result<usize> {
    Ok(dim_homogeneous(d, q)? as usize)
}
