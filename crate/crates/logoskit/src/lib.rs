//! logoskit — a desk-scale scene-text VQA pipeline.
//!
//! The kit covers the full loop for answering questions about text embedded
//! in images: spatial grouping of OCR lines into clusters with hierarchical
//! positional descriptors, PHOC character encodings, a small differentiable
//! array engine, a multimodal transformer with pointer-network decoding,
//! confidence-based selection across several OCR sources, and the two
//! standard evaluation metrics (consensus VQA accuracy and ANLS).
//!
//! Real datasets, pretrained backbones, and commercial OCR engines are out
//! of scope; a deterministic synthetic corpus generator with configurable
//! noisy sources stands in for all of them, which keeps every stage
//! reproducible and testable on one machine.

pub mod corpus;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod phoc;
pub mod selector;
pub mod svg;
pub mod tensor;
pub mod trainer;

use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the failure classes the
/// pipeline distinguishes at the CLI boundary (usage vs. data/contract).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A geometric precondition failed (malformed box coordinates).
    #[error("invalid box: {0}")]
    InvalidBox(String),
    /// An operation that requires at least one element got none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    /// A configuration value is out of its legal range.
    #[error("configuration error: {0}")]
    Config(String),
    /// Two array shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    /// A caller violated an operation contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A record in an input file could not be parsed.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    /// Cross-file referential integrity is broken.
    #[error("integrity error: {0}")]
    Integrity(String),
    /// A sequence exceeds the configured capacity.
    #[error("sequence of length {len} exceeds capacity {cap}")]
    Capacity { len: usize, cap: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
