use std::path::PathBuf;

use thiserror::Error;

use crate::data_model::Task;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. Each variant maps to a stable
/// machine-readable code (see [`Error::code`]) used in CLI diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {field}")]
    NonFiniteValue { field: &'static str },

    #[error("ref_label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("logits must hold at least 2 entries, got {len}")]
    EmptyLogits { len: usize },

    #[error("counterfactual_logits has length {got}, expected {expected}")]
    CounterfactualLength { expected: usize, got: usize },

    #[error("{what} has non-positive extent (w={w}, h={h})")]
    NegativeExtent { what: &'static str, w: f64, h: f64 },

    #[error("confidence {value} outside [0, 1]")]
    ConfidenceOutOfRange { value: f64 },

    #[error("prediction box is missing a confidence")]
    MissingConfidence,

    #[error("image dimensions must be positive, got {w}x{h}")]
    InvalidImage { w: u32, h: u32 },

    #[error("group {group} has no calibration records, its mean confidence is undefined")]
    UndefinedGroupMean { group: u8 },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("expected {expected} records, found {found}")]
    MixedTask { expected: Task, found: Task },

    #[error("record task {record} does not match artifact task {artifact}")]
    TaskMismatch { artifact: Task, record: Task },

    #[error("group {group} is empty")]
    EmptyGroup { group: u8 },

    #[error("{rate} undefined: {reason}")]
    UndefinedRate { rate: &'static str, reason: String },

    #[error("no record carries counterfactual_logits")]
    NoCounterfactuals,

    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: String, reason: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("outcome {index} ({outcome_id}) does not line up with record {record_id}")]
    OutcomeMismatch {
        index: usize,
        outcome_id: String,
        record_id: String,
    },
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::NonFiniteValue { .. } => "NON_FINITE_VALUE",
            Error::LabelOutOfRange { .. } => "LABEL_OUT_OF_RANGE",
            Error::EmptyLogits { .. } => "EMPTY_LOGITS",
            Error::CounterfactualLength { .. } => "COUNTERFACTUAL_LENGTH",
            Error::NegativeExtent { .. } => "NEGATIVE_EXTENT",
            Error::ConfidenceOutOfRange { .. } => "CONFIDENCE_OUT_OF_RANGE",
            Error::MissingConfidence => "MISSING_CONFIDENCE",
            Error::InvalidImage { .. } => "INVALID_IMAGE",
            Error::UndefinedGroupMean { .. } => "UNDEFINED_GROUP_MEAN",
            Error::EmptyCalibration => "EMPTY_CALIBRATION",
            Error::MixedTask { .. } => "MIXED_TASK",
            Error::TaskMismatch { .. } => "TASK_MISMATCH",
            Error::EmptyGroup { .. } => "EMPTY_GROUP",
            Error::UndefinedRate { .. } => "UNDEFINED_RATE",
            Error::NoCounterfactuals => "NO_COUNTERFACTUALS",
            Error::InvalidParam { .. } => "CONFIG_ERROR",
            Error::Parse { .. } => "PARSE_ERROR",
            Error::AtLine { source, .. } => source.code(),
            Error::Io { .. } => "IO_ERROR",
            Error::OutcomeMismatch { .. } => "OUTCOME_MISMATCH",
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParam { .. } => 2,
            Error::AtLine { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
