//! Tabular cooperative Markov games, exact evaluation and exact trust-region iteration.

pub mod error;
pub mod game;
pub mod haml;
pub mod hatrl;
pub mod oracle;
pub mod simplex;
pub mod suites;

pub use error::{Error, Result};
pub use game::{CooperativeMarkovGame, EnvInstance, JointActionSpace};
pub use haml::{DriftFunctional, DriftSpec};
pub use hatrl::{PermutationSampler, TrustRegionConfig};
pub use oracle::{evaluate, TabularJointPolicy, ValueProfile};
