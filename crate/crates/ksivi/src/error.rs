//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("backward requires a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("backward called on a graph with no tracked leaves")]
    UntrackedGraph,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid MLP widths {0:?}: need at least two positive layer sizes")]
    InvalidWidths(Vec<usize>),

    #[error("invalid kernel parameter: {0}")]
    InvalidKernel(String),

    #[error("kernel gradient at the Riesz singularity (x == y with epsilon = 0)")]
    RieszSingularity,

    #[error("Stein kernel requires a twice-differentiable kernel; the Riesz kernel is not")]
    KernelNotTwiceDifferentiable,

    #[error("median bandwidth needs at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("invalid target parameter: {0}")]
    InvalidTarget(String),

    #[error("target has no tractable log-density")]
    NoLogDensity,

    #[error("annealed layer index {index} out of range for {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },

    #[error("temperature must be >= 1, got {0}")]
    InvalidTemperature(f64),

    #[error("marginal score reference requires an identity mean map")]
    NotIdentityFamily,

    #[error("empty batch")]
    EmptyBatch,

    #[error("estimator needs batch size >= {need}, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("training diverged: non-finite loss for {0} consecutive iterations")]
    Diverged(usize),

    #[error("insufficient replications: need >= {need}, got {got}")]
    TooFewReplications { need: usize, got: usize },

    #[error("zero-variance coordinate {0} in correlation matrix")]
    ZeroVariance(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
