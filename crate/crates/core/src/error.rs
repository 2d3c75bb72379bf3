use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("row {row} has zero degree; cannot normalise")]
    ZeroDegree { row: usize },

    #[error("graph is disconnected: vertices {from} and {to} are unreachable")]
    DisconnectedGraph { from: usize, to: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("no frames survive confidence filtering for {0}")]
    EmptySequence(String),

    #[error("degenerate sequence {0}: coordinates have zero spread")]
    DegenerateSequence(String),

    #[error("too few subjects ({subjects}) to fill every split part")]
    TooFewSubjects { subjects: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error in record {record}: {message}")]
    Schema { record: String, message: String },

    #[error("anchor {anchor} has no positive in the batch")]
    NoPositives { anchor: usize },

    #[error("need {needed} classes per batch but only {available} are available")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config file not found: {0}")]
    ConfigNotFound(PathBuf),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged at epoch {epoch}: {source}")]
    TrainingDiverged {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
