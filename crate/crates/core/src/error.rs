use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid splitter configuration: {0}")]
    InvalidConfig(String),
    #[error("duplicate doc_id(s): {0:?}")]
    DuplicateDocIds(Vec<String>),
    #[error("invalid document {doc_id:?}: {reason}")]
    InvalidDocument { doc_id: String, reason: String },
    #[error("duplicate chunk_id {0:?}")]
    DuplicateChunkId(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("request rejected with status {status}: {message}")]
    Request { status: u16, message: String, attempts: u32 },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Requests sent before this error was returned.
    pub fn attempts(&self) -> u32 {
        match self {
            BackendError::Unavailable { attempts, .. } | BackendError::Request { attempts, .. } => *attempts,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("extraction failed for chunk {chunk_id}: {source}")]
    Extraction { chunk_id: String, source: BackendError },
    #[error("embedding failed: {0}")]
    Embedding(BackendError),
    #[error("graph invariant violated: {0}")]
    Invariant(String),
    #[error("cannot build a graph from zero chunks")]
    NoChunks,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid vector for {id}: {reason}")]
    InvalidVector { id: String, reason: String },
    #[error("cutoff k must be at least 1")]
    ZeroCutoff,
    #[error("index is empty")]
    EmptyIndex,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown preset {name:?}; valid presets: {valid}")]
    UnknownPreset { name: String, valid: &'static str },
    #[error("invalid pipeline configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("embedding failed: {0}")]
    Embedding(BackendError),
    #[error("answer generation failed: {0}")]
    Generation(BackendError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("empty query")]
    EmptyQuery,
}
