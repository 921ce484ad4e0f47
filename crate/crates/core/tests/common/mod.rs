#![allow(dead_code)]

use polyformer::baselines::{mlp_backward, mlp_forward, MlpParams, MlpSpec};
use polyformer::constructor::TransformerModel;
use polyformer::experiment::sample_ball;
use polyformer::network::{backward, forward, forward_fast_trace};
use polyformer::polynomials::{nonconstant_indices, MultiIndex, Polynomial};
use rand::Rng;

/// Random polynomial with `1 <= d <= max_d`, exact degree `1 <= q <= max_q`.
pub fn random_polynomial<R: Rng>(rng: &mut R, max_d: usize, max_q: usize) -> Polynomial {
    let d = rng.random_range(1..=max_d);
    let q = rng.random_range(1..=max_q);
    let all = nonconstant_indices(d, q);
    let top: Vec<&MultiIndex> = all.iter().filter(|m| m.degree() == q).collect();
    let mut terms = vec![(MultiIndex::zero(d), rng.random_range(-2.0..2.0))];
    terms.push((top[rng.random_range(0..top.len())].clone(), rng.random_range(0.5..2.0)));
    for m in &all {
        if rng.random_bool(0.4) {
            terms.push((m.clone(), rng.random_range(-2.0..2.0)));
        }
    }
    Polynomial::new(d, q, terms).unwrap()
}

/// Rank by Gaussian elimination with partial pivoting.
pub fn gaussian_rank(mut rows: Vec<Vec<f64>>, rel_tol: f64) -> usize {
    let scale = rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let cols = rows.first().map_or(0, |r| r.len());
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows.len() {
            break;
        }
        let p = (rank..rows.len())
            .max_by(|&a, &b| rows[a][c].abs().total_cmp(&rows[b][c].abs()))
            .unwrap();
        if rows[p][c].abs() <= rel_tol * scale {
            continue;
        }
        rows.swap(rank, p);
        for r in rank + 1..rows.len() {
            let f = rows[r][c] / rows[rank][c];
            if f != 0.0 {
                for k in c..cols {
                    rows[r][k] -= f * rows[rank][k];
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Model with unit embedding rows, readout entries in `[-1, 1]` and a random bias.
pub fn random_model<R: Rng>(rng: &mut R, d: usize, q: usize, n: usize, bound: f64) -> TransformerModel {
    let mut m = TransformerModel::random_init(d, q, n, bound, rng.random()).unwrap();
    for w in m.readout.iter_mut() {
        *w = rng.random_range(-1.0..1.0);
    }
    m.bias = rng.random_range(-1.0..1.0);
    m
}

pub fn ball_points<R: Rng>(rng: &mut R, count: usize, d: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..count).map(|_| sample_ball(rng, d, radius)).collect()
}

fn attention_loss(m: &TransformerModel, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (forward(m, x).unwrap() - y).powi(2))
        .sum::<f64>()
        / xs.len() as f64
}

fn selections(m: &TransformerModel, xs: &[Vec<f64>]) -> Vec<Vec<Vec<usize>>> {
    xs.iter().map(|x| forward_fast_trace(m, x).unwrap().selections).collect()
}

fn vector_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(f64::MIN_POSITIVE)
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over every
/// trainable parameter, or `None` when a perturbation flips a selection.
pub fn attention_fd_error(m: &TransformerModel, xs: &[Vec<f64>], ys: &[f64], h: f64) -> Option<f64> {
    let (g, _) = backward(m, xs, ys).unwrap();
    let analytic: Vec<f64> = g
        .d_embedding
        .iter()
        .chain(&g.d_readout)
        .chain(std::iter::once(&g.d_bias))
        .copied()
        .collect();
    let base_sel = selections(m, xs);
    let (ne, nr) = (m.embedding.len(), m.readout.len());
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..ne + nr + 1 {
        let perturbed = |delta: f64| {
            let mut p = m.clone();
            if i < ne {
                p.embedding[i] += delta;
            } else if i < ne + nr {
                p.readout[i - ne] += delta;
            } else {
                p.bias += delta;
            }
            p
        };
        let (plus, minus) = (perturbed(h), perturbed(-h));
        if selections(&plus, xs) != base_sel || selections(&minus, xs) != base_sel {
            return None;
        }
        numeric.push((attention_loss(&plus, xs, ys) - attention_loss(&minus, xs, ys)) / (2.0 * h));
    }
    Some(vector_rel_error(&analytic, &numeric))
}

/// He-initialized weights with biases in `[-0.5, 0.5]`, so no pre-activation
/// sits exactly on a rectifier kink.
pub fn generic_mlp_params<R: Rng>(rng: &mut R, spec: &MlpSpec) -> MlpParams {
    let mut p = MlpParams::he_init(spec, rng.random());
    for b in p.biases.iter_mut().flatten() {
        *b = rng.random_range(-0.5..0.5);
    }
    p
}

fn flat(p: &MlpParams) -> Vec<f64> {
    p.weights.iter().flatten().chain(p.biases.iter().flatten()).copied().collect()
}

fn set_flat(p: &mut MlpParams, i: usize, delta: f64) {
    let mut k = i;
    for w in p.weights.iter_mut().chain(p.biases.iter_mut()) {
        if k < w.len() {
            w[k] += delta;
            return;
        }
        k -= w.len();
    }
    panic!("index {i} out of range");
}

fn mlp_loss(spec: &MlpSpec, p: &MlpParams, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (mlp_forward(spec, p, x).unwrap() - y).powi(2))
        .sum::<f64>()
        / xs.len() as f64
}

/// Same measure as [`attention_fd_error`] for an MLP, restricted to the
/// parameter indices in `coords` (all when `None`).
pub fn mlp_fd_error(spec: &MlpSpec, p: &MlpParams, xs: &[Vec<f64>], ys: &[f64], h: f64, coords: Option<&[usize]>) -> f64 {
    let (g, _) = mlp_backward(spec, p, xs, ys).unwrap();
    let g = flat(&g);
    let all: Vec<usize> = (0..g.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = p.clone();
        set_flat(&mut plus, i, h);
        let mut minus = p.clone();
        set_flat(&mut minus, i, -h);
        analytic.push(g[i]);
        numeric.push((mlp_loss(spec, &plus, xs, ys) - mlp_loss(spec, &minus, xs, ys)) / (2.0 * h));
    }
    vector_rel_error(&analytic, &numeric)
}
