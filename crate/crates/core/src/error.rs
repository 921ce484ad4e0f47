use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("integer overflow computing {0}")]
    Overflow(&'static str),

    #[error("ridge basis failed the rank certificate after {attempts} attempts (d={dim}, q={degree})")]
    RankDeficient {
        dim: usize,
        degree: usize,
        attempts: u32,
    },

    #[error("ridge decomposition residual {residual:e} exceeds tolerance {tolerance:e}")]
    Decomposition { residual: f64, tolerance: f64 },

    #[error("training diverged at epoch {epoch}: train MSE = {mse}")]
    Diverged { epoch: usize, mse: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
