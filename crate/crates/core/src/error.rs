use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite matrix")]
    NonFiniteMatrix,
    #[error("non-finite gradient in parameter block `{block}` at offset {offset}")]
    NonFiniteGradient { block: String, offset: usize },
    #[error("non-finite function value at coordinate {0}")]
    NonFiniteValue(usize),
    #[error("empty sample set")]
    EmptySet,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown domain kind `{0}`")]
    UnknownKind(String),
    #[error("unknown domain id `{0}`")]
    UnknownDomain(String),
    #[error("degenerate anchor pair")]
    DegenerateAnchors,
    #[error("empty reference set")]
    EmptyReferences,
    #[error("divergence at iteration {iteration}: {term} is non-finite")]
    Divergence { iteration: usize, term: String },
    #[error("pretraining did not converge (loss {loss:.3e} after {iterations} iterations)")]
    NotConverged { loss: f64, iterations: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
