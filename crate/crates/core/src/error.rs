use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised while talking to a model, local or remote.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {reason} (payload: {excerpt})")]
    Malformed { reason: String, excerpt: String },
    #[error("model returned an error for request {id}: {message}")]
    Remote { id: u64, message: String },
    #[error("output length drift: expected {expected} components, got {got}")]
    LengthDrift { expected: usize, got: usize },
    #[error("non-finite value {value} at output component {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("model did not answer within {0:?}")]
    Timeout(std::time::Duration),
    #[error("protocol version {got:?} is not supported (expected \"1\"); upgrade the adapter to protocol version 1")]
    Version { got: String },
    #[error("handshake rejected: {0}")]
    Handshake(String),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("batch of {len} exceeds the model's batch limit {limit}")]
    BatchTooLarge { len: usize, limit: usize },
    #[error("batch element {index} failed: {source}")]
    BatchElement {
        index: usize,
        #[source]
        source: Box<ModelError>,
    },
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {field}: {message}")]
    Manifest { field: String, message: String },
    #[error("sample {sample}: {message}")]
    Sample { sample: String, message: String },
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("tensor: {0}")]
    Tensor(String),
    #[error("encoding field {field:?}: value {value:?} is not mapped (allowed: {allowed})")]
    Encoding {
        field: String,
        value: String,
        allowed: String,
    },
    #[error("masking: {0}")]
    Mask(String),
    #[error("{0}")]
    Grid(String),
    #[error("output length mismatch in {call}: baseline has {expected} components, masked output has {got}")]
    OutputLength {
        call: String,
        expected: usize,
        got: usize,
    },
    #[error("model call failed at sample {sample}, modality {modality}, {patch}: {source}")]
    ModelCall {
        sample: usize,
        modality: String,
        patch: String,
        #[source]
        source: ModelError,
    },
    #[error("model is nondeterministic: baseline for sample {sample} changed by {max_delta:e} on recheck")]
    Nondeterministic { sample: usize, max_delta: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("report: {0}")]
    Report(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn manifest(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Manifest {
            field: field.into(),
            message: message.into(),
        }
    }
}
