use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by the exit code the CLI maps them to.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("objective is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("{ground_truths} ground truths exceed {predictions} predictions")]
    TooManyGroundTruths {
        ground_truths: usize,
        predictions: usize,
    },
    #[error("instance too large for exhaustive matching ({ground_truths}x{predictions}, limit 8x8)")]
    InstanceTooLarge {
        ground_truths: usize,
        predictions: usize,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),
    #[error("truncated or malformed file {0}")]
    Truncated(PathBuf),
    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("malformed json in {path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("gradient check failed: worst parameter `{param}` relative error {error:e}")]
    Verification { param: String, error: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const COMPATIBILITY: i32 = 5;
    pub const VERIFICATION: i32 = 6;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Generation(_) => exit::CONFIG,
            Error::Io { .. }
            | Error::Checksum(_)
            | Error::Truncated(_)
            | Error::BadMagic(_)
            | Error::Version { .. }
            | Error::Json { .. } => exit::IO,
            Error::Shape { .. }
            | Error::NonFinite(_)
            | Error::NonFiniteLoss { .. }
            | Error::MissingGradient(_)
            | Error::NonDeterministic { .. }
            | Error::TooManyGroundTruths { .. }
            | Error::InstanceTooLarge { .. } => exit::NUMERIC,
            Error::Compatibility(_) | Error::UnknownParameter(_) => exit::COMPATIBILITY,
            Error::Invariant(_) | Error::Verification { .. } => exit::VERIFICATION,
        }
    }
}
