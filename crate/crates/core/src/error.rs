//! Shared error type for the core library.

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value {value} at index {index} in {context}")]
    NonFinite {
        context: &'static str,
        index: usize,
        value: f64,
    },

    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("shape mismatch in {context}: ({lr}x{lc}) vs ({rr}x{rc})")]
    ShapeMismatch {
        context: &'static str,
        lr: usize,
        lc: usize,
        rr: usize,
        rc: usize,
    },

    #[error("invalid parameter {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("mask entry at index {index} is {value}, expected 0 or 1")]
    InvalidMaskBit { index: usize, value: u8 },

    #[error("parameter layouts differ in {context}")]
    LayoutMismatch { context: &'static str },

    #[error("label {label} out of range for {num_classes} classes{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    LabelOutOfRange {
        label: usize,
        num_classes: usize,
        line: Option<usize>,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("task {0} already admitted to the replay buffer")]
    DuplicateTask(usize),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("non-finite loss at task {task}, cycle {cycle}, step {step}")]
    NonFiniteLoss { task: usize, cycle: u64, step: u64 },

    #[error("accuracy matrix cell ({i},{j}) is undefined")]
    UndefinedCell { i: usize, j: usize },

    #[error("bad file format for {path}: {message}")]
    Format { path: String, message: String },

    #[error("unsupported version {found} for {path} (expected {expected})")]
    VersionMismatch {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: String },

    #[error("reports compare different streams: {left} vs {right}")]
    StreamMismatch { left: String, right: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
