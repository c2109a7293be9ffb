use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: degenerate input (norm {norm:e} below epsilon)")]
    Degenerate { op: &'static str, norm: f64 },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("relational distribution needs at least 2 support entries, queue holds {0}")]
    InsufficientSupport(usize),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid file format: {0}")]
    Format(String),
    #[error("empty evaluation set")]
    EmptySet,
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("reference pretraining reached only {accuracy:.3} validation accuracy")]
    PretrainFailed { accuracy: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
