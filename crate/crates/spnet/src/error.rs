use thiserror::Error;

/// Errors surfaced by the library. Validation failures map to CLI exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing point attributes: {0:?}")]
    MissingAttributes(Vec<String>),

    #[error("level {level} became empty during downsampling")]
    DegenerateLevel { level: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing forward cache: {0}")]
    State(String),

    #[error("ply: {0}")]
    Ply(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
