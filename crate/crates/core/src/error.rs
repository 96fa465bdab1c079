use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stale forward cache: network version {net} but cache was built at version {cache}")]
    StaleCache { net: u64, cache: u64 },

    #[error("plaintext out of range for modulus")]
    PlaintextRange,

    #[error("key mismatch: expected key {expected}, got {got}")]
    KeyMismatch { expected: String, got: String },

    #[error("fixed-point overflow: |{value}| exceeds the headroom bound of the modulus")]
    FixedPointOverflow { value: f64 },

    #[error("key generation failed: {0}")]
    KeyGen(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("privacy violation: {0}")]
    Privacy(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("training diverged in {stage} at epoch {epoch}: loss {loss}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        loss: f64,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("infeasible timeline: {0}")]
    Infeasible(String),

    #[error("ingestion error at row {row}, column {column}: {reason}")]
    Ingestion {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("config error in field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage tags peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
