use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at round {round}")]
    NonFinite { what: &'static str, round: usize },
    #[error(transparent)]
    Core(#[from] harl_core::Error),
    #[error(transparent)]
    Nn(#[from] harl_nn::NnError),
}

pub type Result<T> = std::result::Result<T, EngineError>;
