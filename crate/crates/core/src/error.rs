use thiserror::Error;

/// Errors produced by the fusion library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("query has no frames")]
    EmptyQuery,
    #[error("feature vector has zero norm")]
    ZeroNormFeature,
    #[error("negative distance {0}")]
    NegativeDistance(f64),
    #[error("template order mismatch between score matrices: {0}")]
    TemplateOrderMismatch(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("backward cache does not belong to this network")]
    CacheMismatch,
    #[error("batch norm in train mode needs at least two rows per feature")]
    DegenerateBatch,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("schedule step {step} outside [0, {total}]")]
    ScheduleOverrun { step: usize, total: usize },
    #[error("every modality is missing for this row")]
    AllModalitiesMissing,
    #[error("unknown subject {0}")]
    UnknownSubject(String),
    #[error("rank sensitivity must exceed 1, got {0}")]
    InvalidDelta(f64),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("quality weight {0} outside (0, 1)")]
    InvalidQualityWeight(f64),
    #[error("modality order mismatch: {0}")]
    ModalityOrderMismatch(String),
    #[error("query has no match templates")]
    NoMatchTemplates,
    #[error("score set is empty")]
    EmptyScoreSet,
    #[error("no non-mated probes")]
    NoNonMatedProbes,
    #[error("degenerate open-set split: {0}")]
    DegenerateSplit(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfig(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
