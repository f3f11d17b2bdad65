//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("PLY parse error at {path}:{line}: {msg}")]
    PlyParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("point {index} at ({x}, {y}, {z}) does not fit in {depth} bits per axis")]
    CoordinateRange {
        index: usize,
        x: i64,
        y: i64,
        z: i64,
        depth: u8,
    },

    #[error("expected {expected} attribute channels, got {got}")]
    ChannelCount { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("ill-conditioned block {block} at level {level}: {msg}")]
    Conditioning {
        level: u8,
        block: usize,
        msg: String,
    },

    #[error("zero prediction degree at level {level}, node {node}")]
    ZeroDegree { level: u8, node: usize },

    #[error("bitstream decode error at byte {offset}: {msg}")]
    Decode { offset: usize, msg: String },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("params schema error in field `{field}`: {msg}")]
    ParamsSchema { field: String, msg: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for usage/validation, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_)
            | Error::ChannelCount { .. }
            | Error::EmptyInput(_)
            | Error::ParamsSchema { .. }
            | Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
