use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A scene graph violates a structural invariant (bad link, self loop, ...).
    #[error("invalid graph structure: {0}")]
    Structure(String),

    /// Two tensors had incompatible shapes for an operation.
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    /// A contract violation that is not a shape mismatch.
    #[error("{0}")]
    Contract(String),

    /// A corpus, vocabulary or checkpoint line could not be parsed.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A class name is absent from the vocabulary.
    #[error("line {line}: unknown {kind} class `{class}`")]
    UnknownClass {
        line: usize,
        kind: &'static str,
        class: String,
    },

    /// A configuration failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// The training loss became NaN or infinite.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    /// An information ceiling cannot be computed by exact enumeration.
    #[error("world is not enumerable for this query: {0}")]
    NonEnumerable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
