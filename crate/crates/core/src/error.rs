//! Crate-wide error type.

/// Errors surfaced by the adaptation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and a parameter vector) disagree on shape.
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A kernel produced NaN or Inf; never propagated silently.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// Invalid configuration (bad group count, unknown corruption, ...).
    #[error("config: {0}")]
    Config(String),

    /// Invalid input to an operation (mismatched sample counts, empty sets, ...).
    #[error("input: {0}")]
    Input(String),

    /// A probability row failed the normalization check.
    #[error("entropy: row {row} sums to {sum}, not a probability vector")]
    NotNormalized { row: usize, sum: f64 },

    /// No layer cleared the purity threshold after shallow freezing.
    #[error("layer selection empty at tau={tau}; decrease tau or freeze fewer shallow layers")]
    EmptySelection { tau: f64 },

    /// A perturbed loss evaluation came back non-finite.
    #[error("gradient estimation failed: non-finite loss at query {query}")]
    Estimation { query: usize },

    /// Model is already in int8 mode.
    #[error("model is already quantized")]
    AlreadyQuantized,

    /// Artifact container is malformed or has the wrong version.
    #[error("artifact: {0}")]
    Artifact(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
