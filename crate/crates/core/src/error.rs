use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("task `{0}` has no simulator instantiation")]
    UnsupportedTask(String),

    #[error("segment `{segment}` has {got} tokens, expected {expected}")]
    SegmentLength {
        segment: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("invalid disturbance `{0}`")]
    InvalidDisturbance(String),

    #[error("scripted expert failed: {0}")]
    ExpertFailure(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("model/config mismatch: {0}")]
    Mismatch(String),

    #[error("missing checkpoint for arm `{0}`")]
    MissingArm(String),

    #[error(transparent)]
    Nn(#[from] tacvla_nn::NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
