use thiserror::Error;

use crate::vocab::TokenId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },

    #[error("line {line}: duplicate group id `{group_id}`")]
    DuplicateGroup { line: usize, group_id: String },

    #[error("line {line}: token {token} outside the {range} range")]
    TokenOutOfRange {
        line: usize,
        token: TokenId,
        range: &'static str,
    },

    #[error("line {line}: condition of group `{group_id}` already appears in split `{other}`")]
    ConditionLeak {
        line: usize,
        group_id: String,
        other: String,
    },

    #[error("motion id `{0}` was never seen in the training split")]
    UnknownMotion(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("group `{group_id}` has no {tier} candidates")]
    MissingTier {
        group_id: String,
        tier: &'static str,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}")]
    Diverged { step: u64 },

    #[error("infeasible world configuration: {0}")]
    Infeasible(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
