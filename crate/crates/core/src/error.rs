use std::path::PathBuf;

use thiserror::Error;

/// Which model produced a logit vector inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Teacher,
    Student,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Teacher => f.write_str("teacher"),
            Side::Student => f.write_str("student"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("logit vector needs at least 2 classes, got {0}")]
    TooFewClasses(usize),

    #[error("non-finite logit at class {0}")]
    NonFiniteLogit(usize),

    #[error("degenerate logits: population std {std:e} is below the z-score threshold")]
    DegenerateLogits { std: f64 },

    #[error("degenerate {side} logits at batch index {index}")]
    DegenerateSample { index: usize, side: Side },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("Taylor expansion of exp is non-positive ({value:e}) at class {index}")]
    NonPositiveExpansion { index: usize, value: f64 },

    #[error("log-series argument {0} is outside the radius of convergence |x| < 1")]
    OutOfRadius(f64),

    #[error("expansion order must be >= 1, got {0}")]
    InvalidOrder(usize),

    #[error("maximum logit must be positive and finite, got {0}")]
    InvalidMaxLogit(f64),

    #[error("temperature {tau} is below the convergence bound {bound}")]
    TemperatureBelowBound { tau: f64, bound: f64 },

    #[error("invalid temperature policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid optimizer spec: {0}")]
    InvalidOptimizer(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("file {0} contains no data rows")]
    EmptyFile(PathBuf),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
