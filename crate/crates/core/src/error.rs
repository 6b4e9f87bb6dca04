use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped by how the CLI reports them: configuration
/// problems, data problems, and numeric aborts each map to a distinct exit
/// status (see [`MsgcaError::exit_code`]).
#[derive(Debug, Error)]
pub enum MsgcaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing embeddings for {} key(s): {}", .0.len(), .0.join(", "))]
    MissingEmbedding(Vec<String>),

    #[error("embedding provider error: {0}")]
    Provider(String),

    #[error("embedding contract violated: expected width {expected}, got {actual}")]
    Contract { expected: usize, actual: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected}); re-save it with a matching build")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl MsgcaError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MsgcaError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit status for the CLI: 1 configuration, 2 data, 3 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            MsgcaError::Config(_) | MsgcaError::CheckpointVersion { .. } => 1,
            MsgcaError::NonFinite(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, MsgcaError>;
