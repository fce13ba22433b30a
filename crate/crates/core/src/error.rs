use std::io;

use thiserror::Error;

use crate::protocol::ClassId;
use crate::trainer::Stage;

/// Errors raised anywhere in the learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("not enough classes: need {needed}, have {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class} has {available} samples, need {needed}")]
    InsufficientSamples {
        class: ClassId,
        needed: usize,
        available: usize,
    },
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("loss diverged ({stage}): {value}")]
    DivergedLoss { stage: &'static str, value: f64 },
    #[error("no samples carry label {0}")]
    EmptyClass(ClassId),
    #[error("uneven class sizes: class {class} has {got} nodes, expected {expected}")]
    UnevenClassSizes {
        class: ClassId,
        expected: usize,
        got: usize,
    },
    #[error("no valid triplet in batch")]
    NoValidTriplet,
    #[error("duplicate label {0}")]
    DuplicateLabel(ClassId),
    #[error("prototype for class {0} has zero norm")]
    ZeroNormPrototype(ClassId),
    #[error("label {0} already present in the class graph")]
    LabelCollision(ClassId),
    #[error("class graph is empty")]
    EmptyGraph,
    #[error("query has zero norm")]
    ZeroNormQuery,
    #[error("label {0} has no node in the class graph")]
    UnknownLabel(ClassId),
    #[error("stage transition {from:?} -> {to:?} does not move forward")]
    StageOrder { from: Stage, to: Stage },
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
