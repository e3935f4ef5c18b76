use thiserror::Error;

use crate::provider::ProviderError;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Stage1(#[from] trigen_stage1::Error),
}

pub type Result<T, E = CaptionError> = std::result::Result<T, E>;
