use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LcaError>;

#[derive(Debug, Error)]
pub enum LcaError {
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("line {line}: row width {found} does not match D={expected}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    FeatureDimMismatch { expected: usize, found: usize },

    #[error("line {line}: non-finite activation value")]
    NonFiniteValue { line: usize },

    #[error("{0}: label file is empty")]
    EmptyFile(PathBuf),

    #[error("activations have {activations} sentences but labels have {labels}")]
    SentenceCountMismatch { activations: usize, labels: usize },

    #[error("sentence {sentence}: {activations} tokens in activations, {labels} in labels")]
    TokenCountMismatch {
        sentence: usize,
        activations: usize,
        labels: usize,
    },

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("control tasks are only defined for token-mode labels")]
    PairModeUnsupported,

    #[error("corpus has fewer than two classes")]
    SingleClassCorpus,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("tag {0:?} has zero weight mass")]
    ZeroMassTag(String),

    #[error("probe weights are all zero")]
    AllZeroWeights,

    #[error("lambda grid is empty")]
    EmptyGrid,

    #[error("neuron subset is empty")]
    EmptySubset,

    #[error("no sentences selected")]
    EmptySelection,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing probe: {0}")]
    MissingProbe(String),

    #[error("invalid run record: {0}")]
    InvalidRecord(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LcaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LcaError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// the environment (filesystem, OS). The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        !matches!(self, LcaError::Io { .. })
    }
}
