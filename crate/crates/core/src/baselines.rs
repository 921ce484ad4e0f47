//! Fully connected rectifier networks used as comparison models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polynomials::BuiltinTarget;
use crate::training::{Gradient, Regressor};

/// Layer widths from input to output; a rectifier follows every linear
/// layer except the last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) || widths.last() != Some(&1) {
            return Err(Error::InvalidInput(format!(
                "layer widths {widths:?} need >= 2 positive entries ending in 1"
            )));
        }
        Ok(MlpSpec { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Linear layers followed by a rectifier.
    pub fn hidden_layers(&self) -> usize {
        self.num_layers() - 1
    }
}

pub fn nn_width_spec(target: BuiltinTarget) -> MlpSpec {
    match target {
        BuiltinTarget::F1 => MlpSpec { widths: vec![2, 10, 1] },
        BuiltinTarget::F2 => MlpSpec { widths: vec![10, 4368, 1] },
    }
}

pub fn nn_depth_spec(target: BuiltinTarget) -> MlpSpec {
    match target {
        BuiltinTarget::F1 => MlpSpec { widths: vec![2, 4, 4, 4, 1] },
        BuiltinTarget::F2 => MlpSpec { widths: vec![10, 120, 120, 120, 120, 120, 120, 1] },
    }
}

/// Baselines for a target without published architectures: one hidden layer
/// of width `n_tokens`, and `q + 1` hidden layers of the smallest common
/// width whose parameter count reaches the wide network's.
pub fn custom_specs(d: usize, q: usize, n_tokens: usize) -> Result<(MlpSpec, MlpSpec)> {
    let width = MlpSpec::new(vec![d, n_tokens, 1])?;
    let target = param_count(&width);
    let deep = |w: usize| {
        let mut widths = vec![d];
        widths.extend(std::iter::repeat_n(w, q + 1));
        widths.push(1);
        MlpSpec { widths }
    };
    let mut w = 1;
    while param_count(&deep(w)) < target {
        w += 1;
    }
    Ok((width, deep(w)))
}

/// `sum (w_in w_out + w_out)` over the linear layers.
pub fn param_count(spec: &MlpSpec) -> u64 {
    spec.widths
        .windows(2)
        .map(|w| (w[0] * w[1] + w[1]) as u64)
        .sum()
}

/// Weights (`out x in`, row-major) and biases per layer. Gradients share
/// the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        MlpParams {
            weights: spec.widths.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect(),
            biases: spec.widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    /// Gaussian weights with variance `2 / fan_in`, zero biases.
    pub fn he_init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MlpParams::zeros(spec);
        for (w, fan_in) in p.weights.iter_mut().zip(&spec.widths) {
            let dist = Normal::new(0.0, (2.0 / *fan_in as f64).sqrt()).expect("finite std");
            w.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        p
    }

    fn check(&self, spec: &MlpSpec) -> Result<()> {
        let ok = self.weights.len() == spec.num_layers()
            && self.biases.len() == spec.num_layers()
            && spec.widths.windows(2).enumerate().all(|(l, w)| {
                self.weights[l].len() == w[0] * w[1] && self.biases[l].len() == w[1]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "parameters do not match widths {:?}",
                spec.widths
            )))
        }
    }

    fn entries(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().chain(self.biases.iter().flatten())
    }

    fn entries_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .flatten()
            .chain(self.biases.iter_mut().flatten())
    }

    fn add_assign(&mut self, other: &MlpParams) {
        for (a, b) in self.entries_mut().zip(other.entries()) {
            *a += b;
        }
    }
}

impl Gradient for MlpParams {
    fn norm_sq(&self) -> f64 {
        self.entries().map(|v| v * v).sum()
    }

    fn scale(&mut self, factor: f64) {
        self.entries_mut().for_each(|v| *v *= factor);
    }
}

/// Pre-activations of every layer.
fn forward_layers(spec: &MlpSpec, p: &MlpParams, x: &[f64]) -> Vec<Vec<f64>> {
    let mut pre = Vec::with_capacity(spec.num_layers());
    let mut act = x.to_vec();
    for l in 0..spec.num_layers() {
        let (n_in, n_out) = (spec.widths[l], spec.widths[l + 1]);
        let z: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &p.weights[l][o * n_in..(o + 1) * n_in];
                row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>() + p.biases[l][o]
            })
            .collect();
        act = z.iter().map(|v| v.max(0.0)).collect();
        pre.push(z);
    }
    pre
}

fn check_x(spec: &MlpSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

pub fn mlp_forward(spec: &MlpSpec, p: &MlpParams, x: &[f64]) -> Result<f64> {
    p.check(spec)?;
    check_x(spec, x)?;
    Ok(forward_layers(spec, p, x).last().expect("at least one layer")[0])
}

fn accumulate_sample(spec: &MlpSpec, p: &MlpParams, x: &[f64], y: f64, inv: f64, g: &mut MlpParams) -> f64 {
    let pre = forward_layers(spec, p, x);
    let pred = pre[spec.num_layers() - 1][0];
    let mut delta = vec![2.0 * (pred - y) * inv];
    for l in (0..spec.num_layers()).rev() {
        let n_in = spec.widths[l];
        let input: Vec<f64> = if l == 0 {
            x.to_vec()
        } else {
            pre[l - 1].iter().map(|v| v.max(0.0)).collect()
        };
        for (o, &dz) in delta.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            g.biases[l][o] += dz;
            for (gw, a) in g.weights[l][o * n_in..(o + 1) * n_in].iter_mut().zip(&input) {
                *gw += dz * a;
            }
        }
        if l > 0 {
            let mut back = vec![0.0; n_in];
            for (o, &dz) in delta.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                for (b, w) in back.iter_mut().zip(&p.weights[l][o * n_in..(o + 1) * n_in]) {
                    *b += dz * w;
                }
            }
            for (b, z) in back.iter_mut().zip(&pre[l - 1]) {
                if *z <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = back;
        }
    }
    pred
}

const GRAD_CHUNK: usize = 32;

/// Gradient of the batch mean squared error and the error itself.
pub fn mlp_backward(spec: &MlpSpec, p: &MlpParams, xs: &[Vec<f64>], ys: &[f64]) -> Result<(MlpParams, f64)> {
    p.check(spec)?;
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "batch has {} inputs and {} targets",
            xs.len(),
            ys.len()
        )));
    }
    for x in xs {
        check_x(spec, x)?;
    }
    let inv = 1.0 / xs.len() as f64;
    let partials: Vec<(MlpParams, f64)> = xs
        .par_chunks(GRAD_CHUNK)
        .zip(ys.par_chunks(GRAD_CHUNK))
        .map(|(xc, yc)| {
            let mut g = MlpParams::zeros(spec);
            let mut sse = 0.0;
            for (x, &y) in xc.iter().zip(yc) {
                let pred = accumulate_sample(spec, p, x, y, inv, &mut g);
                sse += (pred - y) * (pred - y);
            }
            (g, sse)
        })
        .collect();
    let mut total = MlpParams::zeros(spec);
    let mut sse = 0.0;
    for (g, s) in &partials {
        total.add_assign(g);
        sse += s;
    }
    Ok((total, sse * inv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let params = MlpParams::he_init(&spec, seed);
        Mlp { spec, params }
    }
}

impl Regressor for Mlp {
    type Grad = MlpParams;

    fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    fn predict(&self, x: &[f64]) -> Result<f64> {
        check_x(&self.spec, x)?;
        Ok(forward_layers(&self.spec, &self.params, x).last().expect("at least one layer")[0])
    }

    fn gradient(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<(MlpParams, f64)> {
        mlp_backward(&self.spec, &self.params, xs, ys)
    }

    fn sgd_step(&mut self, g: &MlpParams, lr: f64) {
        for (w, d) in self.params.entries_mut().zip(g.entries()) {
            *w -= lr * d;
        }
    }

    fn param_count(&self) -> u64 {
        param_count(&self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_architectures() {
        assert_eq!(nn_width_spec(BuiltinTarget::F1).widths(), &[2, 10, 1]);
        assert_eq!(nn_width_spec(BuiltinTarget::F2).widths(), &[10, 4368, 1]);
        assert_eq!(nn_depth_spec(BuiltinTarget::F1).widths(), &[2, 4, 4, 4, 1]);
        assert_eq!(nn_depth_spec(BuiltinTarget::F2).hidden_layers(), 6);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(param_count(&nn_width_spec(BuiltinTarget::F1)), 41);
        assert_eq!(param_count(&nn_depth_spec(BuiltinTarget::F1)), 57);
        assert_eq!(param_count(&nn_width_spec(BuiltinTarget::F2)), 52417);
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let spec = MlpSpec::new(vec![3, 5, 4, 1]).unwrap();
        let mut p = MlpParams::zeros(&spec);
        p.biases[2][0] = 0.75;
        for x in [[0.0, 0.0, 0.0], [1.0, -5.0, 2.0]] {
            assert_eq!(mlp_forward(&spec, &p, &x).unwrap(), 0.75);
        }
    }

    #[test]
    fn single_linear_layer() {
        let spec = MlpSpec::new(vec![2, 1]).unwrap();
        let p = MlpParams {
            weights: vec![vec![1.0, 1.0]],
            biases: vec![vec![0.0]],
        };
        assert_eq!(mlp_forward(&spec, &p, &[3.0, 4.0]).unwrap(), 7.0);
        assert!(mlp_forward(&spec, &p, &[3.0]).is_err());
        assert!(mlp_forward(&spec, &MlpParams::zeros(&MlpSpec::new(vec![3, 1]).unwrap()), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(MlpSpec::new(vec![2]).is_err());
        assert!(MlpSpec::new(vec![2, 3]).is_err());
        assert!(MlpSpec::new(vec![2, 0, 1]).is_err());
    }

    #[test]
    fn custom_depth_matches_width_budget() {
        let (w, d) = custom_specs(3, 3, 10).unwrap();
        assert_eq!(w.widths(), &[3, 10, 1]);
        assert_eq!(d.hidden_layers(), 4);
        assert!(param_count(&d) >= param_count(&w));
    }
}
