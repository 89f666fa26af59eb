//! Run configuration shared by the training engines.

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnPolicyAlgorithm {
    Happo,
    Hatrpo,
    Haa2c,
}

impl OnPolicyAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Happo => "happo",
            Self::Hatrpo => "hatrpo",
            Self::Haa2c => "haa2c",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateScheme {
    /// Fresh uniformly random agent order every round.
    #[default]
    SequentialRandom,
    /// Agents update in index order every round.
    SequentialFixed,
    /// Every agent optimises against the joint advantage with no ratio recursion.
    Simultaneous,
    /// One parameter set serves every agent.
    SharedParameter,
}

impl UpdateScheme {
    pub fn is_sequential(self) -> bool {
        matches!(self, Self::SequentialRandom | Self::SequentialFixed)
    }
}

/// How a state index becomes a network input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    /// One-hot of the state index.
    #[default]
    OneHot,
    /// The game's own feature map.
    Native,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum NetArch {
    /// A single linear layer without bias, initialised to zero.
    #[default]
    Tabular,
    /// ReLU hidden layers with orthogonal initialisation.
    Mlp { hidden: Vec<usize> },
}

/// Hyperparameters of the on-policy engine. Defaults follow the common on-policy table of the
/// reference hyperparameters, except for network sizes and learning rates, which are sized for
/// small tabular games.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: OnPolicyAlgorithm,
    pub scheme: UpdateScheme,
    pub n_threads: usize,
    pub episode_length: usize,
    pub total_env_steps: usize,
    pub ppo_epochs: usize,
    pub a2c_epochs: usize,
    pub num_mini_batch: usize,
    pub critic_epochs: usize,
    pub critic_mini_batch: usize,
    pub clip: f64,
    pub entropy_coef: f64,
    /// Overrides the game's discount for advantage estimation when set.
    pub gamma: Option<f64>,
    pub gae_lambda: f64,
    pub max_grad_norm: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub optim_eps: f64,
    pub huber_delta: f64,
    pub kl_threshold: f64,
    pub backtrack_coef: f64,
    pub accept_ratio: f64,
    pub ls_steps: usize,
    pub cg_iters: usize,
    pub cg_residual_tol: f64,
    pub normalize_advantages: bool,
    pub encoding: Encoding,
    pub actor: NetArch,
    pub critic: NetArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: OnPolicyAlgorithm::Happo,
            scheme: UpdateScheme::SequentialRandom,
            n_threads: 8,
            episode_length: 50,
            total_env_steps: 200_000,
            ppo_epochs: 5,
            a2c_epochs: 5,
            num_mini_batch: 1,
            critic_epochs: 5,
            critic_mini_batch: 1,
            clip: 0.2,
            entropy_coef: 0.01,
            gamma: None,
            gae_lambda: 0.95,
            max_grad_norm: 10.0,
            actor_lr: 0.05,
            critic_lr: 0.05,
            optim_eps: 1e-5,
            huber_delta: 10.0,
            kl_threshold: 0.005,
            backtrack_coef: 0.8,
            accept_ratio: 0.5,
            ls_steps: 10,
            cg_iters: 10,
            cg_residual_tol: 1e-8,
            normalize_advantages: true,
            encoding: Encoding::OneHot,
            actor: NetArch::Tabular,
            critic: NetArch::Tabular,
        }
    }
}

fn require(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(EngineError::Config(msg.to_string()))
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.n_threads * self.episode_length
    }

    pub fn validate(&self) -> Result<()> {
        require(self.clip > 0.0 && self.clip < 1.0, "clip must lie in (0, 1)")?;
        require(self.kl_threshold > 0.0, "kl_threshold must be positive")?;
        require(self.backtrack_coef > 0.0 && self.backtrack_coef < 1.0, "backtrack_coef must lie in (0, 1)")?;
        require(self.accept_ratio >= 0.0, "accept_ratio must be non-negative")?;
        require(self.n_threads > 0 && self.episode_length > 0, "batch must be non-empty")?;
        require(self.num_mini_batch > 0 && self.num_mini_batch <= self.batch_size(), "bad num_mini_batch")?;
        require(
            self.critic_mini_batch > 0 && self.critic_mini_batch <= self.batch_size(),
            "bad critic_mini_batch",
        )?;
        require((0.0..=1.0).contains(&self.gae_lambda), "gae_lambda must lie in [0, 1]")?;
        if let Some(g) = self.gamma {
            require((0.0..1.0).contains(&g), "gamma must lie in [0, 1)")?;
        }
        require(self.actor_lr > 0.0 && self.critic_lr > 0.0, "learning rates must be positive")?;
        require(self.max_grad_norm > 0.0 && self.huber_delta > 0.0, "max_grad_norm and huber_delta must be positive")?;
        require(self.cg_iters > 0, "cg_iters must be positive")?;
        require(self.entropy_coef >= 0.0, "entropy_coef must be non-negative")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let cfg = TrainConfig { scheme: UpdateScheme::SharedParameter, ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"shared-parameter\""));
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"algorithm":"hatrpo","actor":{"kind":"mlp","hidden":[16]}}"#).unwrap();
        assert_eq!(partial.algorithm, OnPolicyAlgorithm::Hatrpo);
        assert_eq!(partial.actor, NetArch::Mlp { hidden: vec![16] });
        assert!(serde_json::from_str::<TrainConfig>(r#"{"clip_param":0.2}"#).is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { clip: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { kl_threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { backtrack_coef: 1.0, ..Default::default() }.validate().is_err());
    }
}
