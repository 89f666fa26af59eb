//! Sample-based heterogeneous-agent training engines.
pub mod config;
pub mod diffgame;
pub mod error;
pub mod offpolicy;
pub mod onpolicy;
pub mod replay;
pub mod rollout;

pub use config::{Encoding, NetArch, OnPolicyAlgorithm, TrainConfig, UpdateScheme};
pub use error::{EngineError, Result};
pub use onpolicy::{run_training, CurveRow, OnPolicyTrainer, TrainingRun};
