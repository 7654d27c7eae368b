use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("attention mask row {row} permits no keys")]
    EmptyMaskRow { row: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("LoRA rank {rank} is not low-rank for a {out_dim}x{in_dim} weight")]
    RankTooLarge {
        rank: usize,
        in_dim: usize,
        out_dim: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NnError::Shape {
        op,
        detail: detail.into(),
    })
}
