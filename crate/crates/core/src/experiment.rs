//! End-to-end runs: data generation, training of the three models, and the
//! comparison table.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{custom_specs, nn_depth_spec, nn_width_spec, Mlp, MlpSpec};
use crate::constructor::{compile_exact, count_free_params, count_nonzeros, free_param_bound, nonzero_bound, TransformerModel};
use crate::network::forward_fast;
use crate::ridge::random_unit_vector;
use crate::error::{Error, Result};
use crate::polynomials::{dim_homogeneous, BuiltinTarget, Polynomial};
use crate::training::{generate_data, init_attention, split, train_with, Dataset, EpochRecord, Regressor, RunHistory, RunSummary, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSpec {
    Builtin(BuiltinTarget),
    Custom(Polynomial),
}

impl TargetSpec {
    pub fn polynomial(&self) -> Polynomial {
        match self {
            TargetSpec::Builtin(t) => t.polynomial(),
            TargetSpec::Custom(p) => p.clone(),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            TargetSpec::Builtin(t) => t.name(),
            TargetSpec::Custom(_) => "custom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Attention,
    NnDepth,
    NnWidth,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Attention, ModelKind::NnDepth, ModelKind::NnWidth];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Attention => "attention",
            ModelKind::NnDepth => "nn_depth",
            ModelKind::NnWidth => "nn_width",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown model {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub count: usize,
    pub covariance: Vec<f64>,
    pub train_count: usize,
}

impl DataConfig {
    pub fn preset(target: BuiltinTarget) -> Self {
        match target {
            BuiltinTarget::F1 => DataConfig {
                count: 10000,
                covariance: vec![100.0, 100.0],
                train_count: 9000,
            },
            BuiltinTarget::F2 => DataConfig {
                count: 50000,
                covariance: vec![1.0; 10],
                train_count: 45000,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub target: TargetSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Multiplies sample counts and epochs, rounding up.
    pub scale: f64,
    /// Base seed: data, split, initialization and shuffling derive from it.
    pub seed: u64,
    /// Token count of the attention model; `C(d-1+q, q)` when absent.
    pub attention_tokens: Option<usize>,
}

impl ExperimentConfig {
    pub fn preset(target: BuiltinTarget) -> Self {
        ExperimentConfig {
            target: TargetSpec::Builtin(target),
            data: DataConfig::preset(target),
            train: TrainConfig::preset(target),
            scale: 1.0,
            seed: 0,
            attention_tokens: None,
        }
    }

    /// Data and training settings after scaling. Batches larger than the
    /// scaled training set become full-batch.
    pub fn scaled(&self) -> Result<(DataConfig, TrainConfig)> {
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "scale {} must be in (0, 1]",
                self.scale
            )));
        }
        let up = |v: usize| (v as f64 * self.scale).ceil() as usize;
        let data = DataConfig {
            count: up(self.data.count),
            covariance: self.data.covariance.clone(),
            train_count: up(self.data.train_count),
        };
        let mut train = self.train.clone();
        train.epochs = up(train.epochs);
        train.batch_size = train.batch_size.min(data.train_count);
        train.seed = self.seed.wrapping_add(3);
        Ok((data, train))
    }

    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        let (data, _) = self.scaled()?;
        let ds = generate_data(&self.target.polynomial(), data.count, &data.covariance, self.seed)?;
        split(&ds, data.train_count, self.seed.wrapping_add(1))
    }

    fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn mlp_spec(&self, kind: ModelKind) -> Result<MlpSpec> {
        match (&self.target, kind) {
            (TargetSpec::Builtin(t), ModelKind::NnWidth) => Ok(nn_width_spec(*t)),
            (TargetSpec::Builtin(t), ModelKind::NnDepth) => Ok(nn_depth_spec(*t)),
            (TargetSpec::Custom(p), ModelKind::NnWidth | ModelKind::NnDepth) => {
                let q = p.actual_degree();
                let n = self.tokens(p)?;
                let (w, d) = custom_specs(p.dim(), q, n)?;
                Ok(if kind == ModelKind::NnWidth { w } else { d })
            }
            (_, ModelKind::Attention) => Err(Error::InvalidInput("attention model has no layer widths".into())),
        }
    }

    fn tokens(&self, p: &Polynomial) -> Result<usize> {
        match self.attention_tokens {
            Some(n) => Ok(n),
            None => usize::try_from(dim_homogeneous(p.dim(), p.actual_degree())?)
                .map_err(|_| Error::Overflow("token count")),
        }
    }

    pub fn init_model(&self, kind: ModelKind) -> Result<TrainedModel> {
        match kind {
            ModelKind::Attention => {
                let p = self.target.polynomial();
                let q = p.actual_degree();
                if q == 0 {
                    return Err(Error::InvalidInput("constant target needs no attention blocks".into()));
                }
                let m = init_attention(p.dim(), q, Some(self.tokens(&p)?), &self.data.covariance, self.init_seed())?;
                Ok(TrainedModel::Attention(m))
            }
            _ => Ok(TrainedModel::Mlp(Mlp::new(self.mlp_spec(kind)?, self.init_seed()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainedModel {
    Attention(TransformerModel),
    Mlp(Mlp),
}

impl TrainedModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        match self {
            TrainedModel::Attention(m) => m.predict(x),
            TrainedModel::Mlp(m) => m.predict(x),
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            TrainedModel::Attention(m) => m.param_count(),
            TrainedModel::Mlp(m) => m.param_count(),
        }
    }

    /// JSON of the attention model in its documented layout, or the MLP's
    /// widths and parameters.
    pub fn to_json(&self) -> Result<String> {
        match self {
            TrainedModel::Attention(m) => m.to_json(),
            TrainedModel::Mlp(m) => Ok(serde_json::to_string(m)?),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelRun {
    pub kind: ModelKind,
    pub model: TrainedModel,
    pub history: RunHistory,
    pub summary: RunSummary,
}

/// Trains one model of the experiment.
pub fn run_model(cfg: &ExperimentConfig, kind: ModelKind, train_ds: &Dataset, test_ds: &Dataset, on_epoch: impl FnMut(&EpochRecord)) -> Result<ModelRun> {
    let (_, tcfg) = cfg.scaled()?;
    let mut model = cfg.init_model(kind)?;
    let history = match &mut model {
        TrainedModel::Attention(m) => train_with(m, train_ds, test_ds, &tcfg, on_epoch)?,
        TrainedModel::Mlp(m) => train_with(m, train_ds, test_ds, &tcfg, on_epoch)?,
    };
    let summary = RunSummary::from_history(kind.name(), model.param_count(), &history)?;
    Ok(ModelRun {
        kind,
        model,
        history,
        summary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub target: String,
    pub scale: f64,
    pub epochs: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub runs: Vec<RunSummary>,
}

impl ComparisonReport {
    pub fn new(cfg: &ExperimentConfig, train_size: usize, test_size: usize, runs: &[ModelRun]) -> Result<Self> {
        Ok(ComparisonReport {
            target: cfg.target.name().to_string(),
            scale: cfg.scale,
            epochs: cfg.scaled()?.1.epochs,
            train_size,
            test_size,
            runs: runs.iter().map(|r| r.summary.clone()).collect(),
        })
    }

    pub fn get(&self, kind: ModelKind) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.model == kind.name())
    }

    /// Whether the attention model's test error is strictly below every
    /// other model's.
    pub fn attention_wins(&self) -> bool {
        let Some(att) = self.get(ModelKind::Attention) else {
            return false;
        };
        self.runs
            .iter()
            .filter(|r| r.model != att.model)
            .all(|r| att.test_mse_clean < r.test_mse_clean)
    }
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "target {} | scale {} | {} epochs | train {} / test {}",
            self.target, self.scale, self.epochs, self.train_size, self.test_size
        )?;
        writeln!(
            f,
            "{:<10} {:>8} {:>14} {:>14} {:>8} {:>10}",
            "MODEL", "PARAMS", "MSE_TR", "MSE_TE", "#EPOCHS", "RUN TIME"
        )?;
        for r in &self.runs {
            let conv = r.convergence_epoch.map_or("-".to_string(), |e| e.to_string());
            let secs = r.convergence_seconds.unwrap_or(r.wall_time);
            writeln!(
                f,
                "{:<10} {:>8} {:>14.6} {:>14.6} {:>8} {:>9.2}s",
                r.model, r.param_count, r.train_mse_noisy, r.test_mse_clean, conv, secs
            )?;
        }
        Ok(())
    }
}

/// Trains all three models on one shared dataset.
pub fn reproduce(cfg: &ExperimentConfig, mut on_epoch: impl FnMut(ModelKind, &EpochRecord)) -> Result<(ComparisonReport, Vec<ModelRun>)> {
    let (train_ds, test_ds) = cfg.generate()?;
    let runs = ModelKind::ALL
        .into_iter()
        .map(|kind| run_model(cfg, kind, &train_ds, &test_ds, |r| on_epoch(kind, r)))
        .collect::<Result<Vec<_>>>()?;
    let report = ComparisonReport::new(cfg, train_ds.len(), test_ds.len(), &runs)?;
    Ok((report, runs))
}

/// Uniform sample from the closed ball of radius `radius` in `R^d`.
pub fn sample_ball<R: Rng + ?Sized>(rng: &mut R, d: usize, radius: f64) -> Vec<f64> {
    let dir = random_unit_vector(rng, d);
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    dir.into_iter().map(|v| v * r).collect()
}

/// Error of a compiled model against direct evaluation, with its counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompileReport {
    pub dim: usize,
    pub degree: usize,
    pub tokens: usize,
    pub points: usize,
    pub max_abs_error: f64,
    /// `max |model - p| / max(1, |p|)` over the sampled points.
    pub max_rel_error: f64,
    pub free_params: u64,
    pub nonzeros: u64,
    pub free_param_bound: u64,
    pub nonzero_bound: u64,
    /// Non-zeros of each fixed block.
    pub block_nonzeros: Vec<usize>,
}

/// Relative error above which a compiled model counts as wrong.
pub const COMPILE_TOL: f64 = 1e-6;

impl CompileReport {
    pub fn within_bounds(&self) -> bool {
        self.free_params <= self.free_param_bound && self.nonzeros <= self.nonzero_bound
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < COMPILE_TOL && self.within_bounds()
    }
}

impl fmt::Display for CompileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d={} q={} n={} points={}", self.dim, self.degree, self.tokens, self.points)?;
        writeln!(f, "max abs error  {:.3e}", self.max_abs_error)?;
        writeln!(f, "max rel error  {:.3e}", self.max_rel_error)?;
        writeln!(f, "free params    {} (bound {})", self.free_params, self.free_param_bound)?;
        writeln!(f, "non-zeros      {} (bound {})", self.nonzeros, self.nonzero_bound)?;
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Compiles `p` for inputs of norm at most `bound` and compares the fast
/// forward pass with direct evaluation at `points` random points of the ball.
pub fn compile_check(p: &Polynomial, bound: f64, seed: u64, points: usize) -> Result<(TransformerModel, CompileReport)> {
    let m = compile_exact(p, bound, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for _ in 0..points {
        let x = sample_ball(&mut rng, p.dim(), bound);
        let want = p.eval(&x)?;
        let err = (forward_fast(&m, &x)? - want).abs();
        max_abs = max_abs.max(err);
        max_rel = max_rel.max(err / want.abs().max(1.0));
    }
    let report = CompileReport {
        dim: m.d,
        degree: m.q,
        tokens: m.n,
        points,
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        free_params: count_free_params(&m),
        nonzeros: count_nonzeros(&m),
        free_param_bound: free_param_bound(m.d, m.q)?,
        nonzero_bound: nonzero_bound(m.d, m.q)?,
        block_nonzeros: m.blocks.iter().map(|b| b.count_nonzeros()).collect(),
    };
    Ok((m, report))
}
