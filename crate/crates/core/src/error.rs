use thiserror::Error;

#[derive(Debug, Error)]
pub enum GdaError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("timestep {t} outside [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("invalid step pair: t={t}, t_prev={t_prev}")]
    InvalidStepPair { t: usize, t_prev: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("degenerate embedding: zero norm")]
    ZeroNormEmbedding,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GdaError> = std::result::Result<T, E>;
