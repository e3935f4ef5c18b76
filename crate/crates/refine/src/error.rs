use thiserror::Error;
use trigen_core::NumError;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Stage1(#[from] trigen_stage1::Error),
    #[error("mesh: {0}")]
    Mesh(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<RefineError>,
    },
}

impl RefineError {
    pub fn in_stage(self, stage: &'static str) -> Self {
        RefineError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = RefineError> = std::result::Result<T, E>;
