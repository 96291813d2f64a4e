use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlexError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at device {device} round {round}")]
    NonFiniteLoss { device: usize, round: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error(
        "pruning target for level {level} (ratio {target}) unreachable within tolerance {epsilon}"
    )]
    UnreachableTarget {
        level: usize,
        target: f64,
        epsilon: f64,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FlexError>;
