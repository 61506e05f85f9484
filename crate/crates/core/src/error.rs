use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical procedure failed to converge or produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The requested configuration is not supported (usually dimension limits).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Evaluation at a singular point, such as the conditional score at t = 0.
    #[error("singularity: {0}")]
    Singularity(String),

    /// The diffused density is below the evaluation floor at the query point.
    #[error("density {density:e} below floor {floor:e} at the query point")]
    Region { density: f64, floor: f64 },

    /// The training loss became non-finite.
    #[error("training diverged at step {step} (loss {loss})")]
    Training { step: usize, loss: f64 },

    /// A reverse-SDE chain left the finite range.
    #[error("reverse sampler blew up at step {step}")]
    BlowUp { step: usize },

    /// Shapes of arguments do not match.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed file contents or invalid configuration.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
