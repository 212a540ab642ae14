use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema violation in conversation `{conversation}`: {detail}")]
    Schema { conversation: String, detail: String },

    #[error("duplicate conversation id `{0}`")]
    DuplicateId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid template {id}: {detail}")]
    Template { id: String, detail: String },

    #[error("invalid ontology: {0}")]
    Ontology(String),

    #[error("turn index {index} out of range (conversation has {len} turns)")]
    TurnOutOfRange { index: usize, len: usize },

    #[error("context overflow in item {item}: {needed} positions needed, context length is {limit}")]
    ContextOverflow {
        item: usize,
        needed: usize,
        limit: usize,
    },

    #[error("non-finite loss ({loss}) at step {step}")]
    NonFiniteLoss { loss: f64, step: usize },

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("invalid ensemble weights: {0}")]
    InvalidWeights(String),

    #[error("empty training set: {0}")]
    EmptyTrainingSet(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("evaluation: {0}")]
    Metric(String),

    #[error("frozen model was modified: {0}")]
    FrozenModified(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code for the command-line runner: 1 usage, 2 data, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Io { .. }
            | Error::Json(_)
            | Error::Schema { .. }
            | Error::DuplicateId(_)
            | Error::Template { .. }
            | Error::Ontology(_)
            | Error::TurnOutOfRange { .. }
            | Error::VocabularyMismatch(_)
            | Error::InvalidWeights(_)
            | Error::EmptyTrainingSet(_)
            | Error::Checkpoint(_)
            | Error::Metric(_) => 2,
            Error::ContextOverflow { .. } | Error::NonFiniteLoss { .. } | Error::FrozenModified(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
