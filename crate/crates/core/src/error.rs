use std::path::PathBuf;

use thiserror::Error;

use crate::datamodel::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}:{column}: {message}", path.display())]
    ManifestParse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("record `{id}` is invalid: {}", format_violations(.violations))]
    InvalidRecord { id: String, violations: Vec<Violation> },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("{}: bad magic {found:?}, expected \"HHAF\"", path.display())]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{}: unsupported feature file version {found}", path.display())]
    BadVersion { path: PathBuf, found: u32 },

    #[error("{}: truncated feature file, expected {expected} bytes, found {found}", path.display())]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{}: header declares {rows}x{cols} which exceeds the {limit}-element cap", path.display())]
    HeaderTooLarge {
        path: PathBuf,
        rows: u32,
        cols: u32,
        limit: u64,
    },

    #[error("{}: header declares empty matrix {rows}x{cols}", path.display())]
    EmptyHeader { path: PathBuf, rows: u32, cols: u32 },

    #[error("feature matrix contains a non-finite value at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid label runs: {0}")]
    InvalidLabels(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {message}", path.display())]
    ConfigParse { path: PathBuf, message: String },

    #[error("no prediction for video `{0}`")]
    MissingPrediction(String),

    #[error("degenerate generator spec: {0}")]
    DegenerateSpec(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("score range is degenerate: s_max ({max}) must exceed s_min ({min})")]
    DegenerateRange { min: f64, max: f64 },

    #[error("empty segment span")]
    EmptySpan,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint tensor `{name}` incompatible with config: expected {expected:?}, found {found:?}")]
    IncompatibleCheckpoint {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite training loss at epoch {epoch} on video `{video}` (seg {seg}, mse {mse})")]
    NonFiniteLoss {
        epoch: usize,
        video: String,
        seg: f64,
        mse: f64,
    },

    #[error("video `{id}`: {source}")]
    Video {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn in_video(self, id: &str) -> Self {
        Error::Video {
            id: id.to_owned(),
            source: Box::new(self),
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
