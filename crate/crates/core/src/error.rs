use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing tensor blob: {0}")]
    MissingBlob(PathBuf),

    #[error("size mismatch for blob {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("unsupported layer `{id}` for {op}")]
    Unsupported { id: String, op: &'static str },

    #[error("invalid quantization parameters: {0}")]
    Quant(String),

    #[error("batch norm `{0}` has no conv/fc predecessor")]
    BnWithoutPredecessor(String),

    #[error("cannot re-fuse batch norm into `{0}`: weights are not per-channel quantized")]
    PerTensorRefuse(String),

    #[error("optimization diverged in layer `{layer}` at iteration {iteration}")]
    Divergence { layer: String, iteration: usize },

    #[error("bias tuning diverged at iteration {0}")]
    BiasTuneDivergence(usize),

    #[error("infeasible allocation: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
