use std::path::PathBuf;

use crate::pipeline::Stage;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("value {value} is outside the Q15.17 range")]
    OutOfRange { value: f64 },

    #[error("division by zero")]
    DivisionByZero,

    #[error("{op} saturated")]
    Saturated { op: &'static str },

    #[error("{op}: argument {value} outside the supported domain")]
    Domain { op: &'static str, value: f64 },

    #[error("attention over an empty KV cache")]
    EmptyCache,

    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("length {len} is not divisible into {parts} parts")]
    NotDivisible { len: usize, parts: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {layer}, stage {stage}: {source}")]
    Stage {
        layer: usize,
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn at(self, layer: usize, stage: Stage) -> Error {
        Error::Stage {
            layer,
            stage,
            source: Box::new(self),
        }
    }
}
