//! Small dense networks with hand-written gradients, policy heads, optimisers and checkpoints.
pub mod checkpoint;
pub mod error;
pub mod heads;
pub mod mlp;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use heads::{CategoricalPolicy, DeterministicPolicy, DiagGaussianPolicy, DuelingQ, StochasticPolicy};
pub use mlp::{Activation, Mlp, MlpSpec};
pub use optim::{clip_grad_norm, huber, Adam};
