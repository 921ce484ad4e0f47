//! Synthetic regression data and the SGD training loop shared by every model.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constructor::{count_free_params, TransformerModel};
use crate::error::{Error, Result};
use crate::network::{backward, forward_fast, GradientSet};
use crate::polynomials::{dim_homogeneous, BuiltinTarget, Polynomial};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub noisy_labels: Vec<f64>,
    pub clean_labels: Vec<f64>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.len())
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            noisy_labels: idx.iter().map(|&i| self.noisy_labels[i]).collect(),
            clean_labels: idx.iter().map(|&i| self.clean_labels[i]).collect(),
            seed: self.seed,
        }
    }
}

/// `x ~ N(0, diag(cov))`, `y = target(x) + e` with `e ~ N(0, 1)`.
pub fn generate_data(target: &Polynomial, count: usize, covariance_diagonal: &[f64], seed: u64) -> Result<Dataset> {
    if covariance_diagonal.len() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: covariance_diagonal.len(),
        });
    }
    if let Some(bad) = covariance_diagonal.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput(format!("covariance entry {bad} must be positive")));
    }
    let dists: Vec<Normal<f64>> = covariance_diagonal
        .iter()
        .map(|v| Normal::new(0.0, v.sqrt()).expect("positive finite std"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(count);
    let mut noisy_labels = Vec::with_capacity(count);
    let mut clean_labels = Vec::with_capacity(count);
    for _ in 0..count {
        let x: Vec<f64> = dists.iter().map(|d| d.sample(&mut rng)).collect();
        let noise: f64 = StandardNormal.sample(&mut rng);
        let y = target.eval(&x)?;
        inputs.push(x);
        clean_labels.push(y);
        noisy_labels.push(y + noise);
    }
    Ok(Dataset {
        inputs,
        noisy_labels,
        clean_labels,
        seed,
    })
}

/// Seeded random split into `train_count` and the rest.
pub fn split(ds: &Dataset, train_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if train_count == 0 || train_count >= ds.len() {
        return Err(Error::InvalidInput(format!(
            "train count {train_count} must be in 1..{}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((ds.subset(&idx[..train_count]), ds.subset(&idx[train_count..])))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_max: f64,
    pub clip_norm: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 600,
            batch_size: 5000,
            lr_init: 1e-4,
            lr_max: 1e-3,
            clip_norm: 1.0,
            warmup_fraction: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Epochs and batch size of the benchmark runs, with a clip threshold of 5.
    pub fn preset(target: BuiltinTarget) -> Self {
        let (epochs, batch_size) = match target {
            BuiltinTarget::F1 => (600, 5000),
            BuiltinTarget::F2 => (2000, 25000),
        };
        TrainConfig {
            epochs,
            batch_size,
            clip_norm: 5.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self, train_size: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 || self.batch_size > train_size {
            return bad(format!(
                "batch size {} must be in 1..={train_size}",
                self.batch_size
            ));
        }
        if !(self.lr_init > 0.0 && self.lr_init <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!(
                "learning rates need 0 < {} <= {}",
                self.lr_init, self.lr_max
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!(
                "warmup fraction {} must be in (0, 1)",
                self.warmup_fraction
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_size: usize) -> usize {
        train_size.div_ceil(self.batch_size)
    }
}

/// Linear ramp `lr_init -> lr_max` over the warmup steps, then linear anneal
/// back to `lr_init` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, lr_init: f64, lr_max: f64, warmup_fraction: f64) -> f64 {
    assert!(step < total_steps, "step {step} out of range {total_steps}");
    let warm = ((warmup_fraction * total_steps as f64).floor() as usize).min(total_steps - 1);
    let lr = if step < warm {
        lr_init + (lr_max - lr_init) * step as f64 / warm as f64
    } else {
        let span = total_steps - 1 - warm;
        if span == 0 {
            lr_max
        } else {
            lr_max - (lr_max - lr_init) * (step - warm) as f64 / span as f64
        }
    };
    lr.clamp(lr_init, lr_max)
}

/// Flat view of a model's gradient for clipping.
pub trait Gradient {
    fn norm_sq(&self) -> f64;
    fn scale(&mut self, factor: f64);
}

impl Gradient for GradientSet {
    fn norm_sq(&self) -> f64 {
        GradientSet::norm_sq(self)
    }

    fn scale(&mut self, factor: f64) {
        GradientSet::scale(self, factor)
    }
}

/// Rescales `g` to global L2 norm `clip_norm` when it is larger.
pub fn clip_gradients<G: Gradient>(mut g: G, clip_norm: f64) -> G {
    let norm = g.norm_sq().sqrt();
    if norm > clip_norm {
        g.scale(clip_norm / norm);
    }
    g
}

/// A model trained by plain SGD on the mean squared error.
pub trait Regressor: Sync {
    type Grad: Gradient;

    fn input_dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<f64>;
    /// Gradient of the batch mean squared error, and that error.
    fn gradient(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<(Self::Grad, f64)>;
    fn sgd_step(&mut self, g: &Self::Grad, lr: f64);
    fn param_count(&self) -> u64;
}

impl Regressor for TransformerModel {
    type Grad = GradientSet;

    fn input_dim(&self) -> usize {
        self.d
    }

    fn predict(&self, x: &[f64]) -> Result<f64> {
        forward_fast(self, x)
    }

    fn gradient(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<(GradientSet, f64)> {
        backward(self, xs, ys)
    }

    fn sgd_step(&mut self, g: &GradientSet, lr: f64) {
        for (w, d) in self.embedding.iter_mut().zip(&g.d_embedding) {
            *w -= lr * d;
        }
        for (w, d) in self.readout.iter_mut().zip(&g.d_readout) {
            *w -= lr * d;
        }
        self.bias -= lr * g.d_bias;
    }

    fn param_count(&self) -> u64 {
        count_free_params(self)
    }
}

/// Trainable attention model: unit-norm random embedding rows, zero readout,
/// blocks sized for `3 sqrt(max covariance * d)`. `n` defaults to `C(d-1+q, q)`.
pub fn init_attention(d: usize, q: usize, n: Option<usize>, covariance_diagonal: &[f64], seed: u64) -> Result<TransformerModel> {
    let n = match n {
        Some(n) => n,
        None => usize::try_from(dim_homogeneous(d, q)?).map_err(|_| Error::Overflow("token count"))?,
    };
    let max_cov = covariance_diagonal.iter().cloned().fold(0.0, f64::max);
    let bound = 3.0 * (max_cov * d as f64).sqrt();
    TransformerModel::random_init(d, q, n, bound, seed)
}

/// Mean squared error of `model` on `xs` against `ys`.
pub fn evaluate_mse<R: Regressor>(model: &R, xs: &[Vec<f64>], ys: &[f64]) -> Result<f64> {
    let preds: Vec<f64> = xs.par_iter().map(|x| model.predict(x)).collect::<Result<_>>()?;
    let sse: f64 = preds.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(sse / xs.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse_noisy: f64,
    pub test_mse_clean: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

impl RunHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// First epoch whose training error differs from the previous epoch's by
    /// less than `tol`.
    pub fn convergence_epoch(&self, tol: f64) -> Option<usize> {
        self.records
            .windows(2)
            .find(|w| (w[1].train_mse_noisy - w[0].train_mse_noisy).abs() < tol)
            .map(|w| w[1].epoch)
    }

    /// Same records with wall times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RunHistory {
        RunHistory {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord {
                    wall_time: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }
}

/// Epoch-to-epoch change in training error below which a run counts as converged.
pub const CONVERGENCE_TOL: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub param_count: u64,
    pub epochs: usize,
    pub train_mse_noisy: f64,
    pub test_mse_clean: f64,
    pub convergence_epoch: Option<usize>,
    /// Wall time up to the convergence epoch, if the run converged.
    pub convergence_seconds: Option<f64>,
    pub wall_time: f64,
}

impl RunSummary {
    pub fn from_history(model: &str, param_count: u64, h: &RunHistory) -> Result<Self> {
        let last = h
            .last()
            .ok_or_else(|| Error::InvalidInput("empty history".into()))?;
        let convergence_epoch = h.convergence_epoch(CONVERGENCE_TOL);
        Ok(RunSummary {
            model: model.to_string(),
            param_count,
            epochs: last.epoch,
            train_mse_noisy: last.train_mse_noisy,
            test_mse_clean: last.test_mse_clean,
            convergence_epoch,
            convergence_seconds: convergence_epoch.map(|e| h.records[e - 1].wall_time),
            wall_time: last.wall_time,
        })
    }
}

/// Minibatch SGD with a one-cycle schedule and gradient clipping. After
/// every epoch the training error (noisy labels) and test error (clean
/// labels) are recorded.
pub fn train<R: Regressor>(model: &mut R, train_ds: &Dataset, test_ds: &Dataset, cfg: &TrainConfig) -> Result<RunHistory> {
    train_with(model, train_ds, test_ds, cfg, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with<R: Regressor>(
    model: &mut R,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunHistory> {
    cfg.validate(train_ds.len())?;
    for ds in [train_ds, test_ds] {
        if ds.dim() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                got: ds.dim(),
            });
        }
    }
    let steps_per_epoch = cfg.steps_per_epoch(train_ds.len());
    let total = cfg.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut history = RunHistory::default();
    let start = Instant::now();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut lr = cfg.lr_init;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&i| train_ds.inputs[i].clone()).collect();
            let ys: Vec<f64> = batch.iter().map(|&i| train_ds.noisy_labels[i]).collect();
            let (g, _) = model.gradient(&xs, &ys)?;
            let g = clip_gradients(g, cfg.clip_norm);
            lr = one_cycle_lr(step, total, cfg.lr_init, cfg.lr_max, cfg.warmup_fraction);
            model.sgd_step(&g, lr);
            step += 1;
        }
        let train_mse = evaluate_mse(model, &train_ds.inputs, &train_ds.noisy_labels)?;
        if !train_mse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                mse: train_mse,
            });
        }
        let test_mse = evaluate_mse(model, &test_ds.inputs, &test_ds.clean_labels)?;
        let record = EpochRecord {
            epoch,
            train_mse_noisy: train_mse,
            test_mse_clean: test_mse,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.records.push(record);
    }
    Ok(history)
}
