use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed MIDI at byte {offset}: {message}")]
    Midi { offset: usize, message: String },

    #[error("unsupported SMF format {0} (only formats 0 and 1 are accepted)")]
    UnsupportedMidiFormat(u16),

    #[error("unsupported time signature {numerator}/{denominator} (only 4/4 is accepted)")]
    UnsupportedTimeSignature { numerator: u8, denominator: u32 },

    #[error("malformed tensor file at byte {offset}: {message}")]
    TensorFormat { offset: usize, message: String },

    #[error("truncated tensor payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("condition features disagree on frame count: fv has {fv} rows, fl has {fl}")]
    FrameMismatch { fv: usize, fl: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("timestep {t} outside 1..={n}")]
    TimestepOutOfRange { t: usize, n: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("id {0:?} not present in the retrieval pool")]
    MissingGroundTruth(String),

    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
