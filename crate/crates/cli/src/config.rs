//! Run configuration documents and environment construction.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use harl_core::game::{
    make_diff_game, make_grid_rendezvous_with, make_matrix_game_example2, make_random_game, make_xor_team_game,
    ContinuousTwoAgentGame, GridConfig, TargetMatchingGame,
};
use harl_core::{CooperativeMarkovGame, DriftSpec, TrustRegionConfig};
use harl_engines::offpolicy::{OffPolicyAlgorithm, OffPolicyConfig};
use harl_engines::{OnPolicyAlgorithm, TrainConfig, UpdateScheme};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Happo,
    Hatrpo,
    Haa2c,
    Haddpg,
    Hatd3,
    Had3qn,
    Maddpg,
}

pub enum Family {
    OnPolicy(OnPolicyAlgorithm),
    OffPolicy(OffPolicyAlgorithm),
}

impl Algorithm {
    pub fn family(self) -> Family {
        match self {
            Self::Happo => Family::OnPolicy(OnPolicyAlgorithm::Happo),
            Self::Hatrpo => Family::OnPolicy(OnPolicyAlgorithm::Hatrpo),
            Self::Haa2c => Family::OnPolicy(OnPolicyAlgorithm::Haa2c),
            Self::Haddpg => Family::OffPolicy(OffPolicyAlgorithm::Haddpg),
            Self::Hatd3 => Family::OffPolicy(OffPolicyAlgorithm::Hatd3),
            Self::Had3qn => Family::OffPolicy(OffPolicyAlgorithm::Had3qn),
            Self::Maddpg => Family::OffPolicy(OffPolicyAlgorithm::Maddpg),
        }
    }
}

/// Environment selector; `name` picks the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Example2,
    Xor {
        n: usize,
    },
    GridRendezvous(GridConfig),
    Random {
        n_agents: usize,
        n_states: usize,
        n_actions: Vec<usize>,
        gamma: f64,
        seed: u64,
    },
    TargetMatching {
        #[serde(default)]
        targets: Option<Vec<Vec<f64>>>,
    },
    DiffGame,
    /// A game document written by `export-game`.
    File {
        path: PathBuf,
    },
}

pub enum Env {
    Tabular(Arc<CooperativeMarkovGame>),
    TargetMatching(TargetMatchingGame),
    Differentiable(ContinuousTwoAgentGame),
}

impl EnvSpec {
    pub fn build(&self) -> anyhow::Result<Env> {
        Ok(match self {
            Self::Example2 => Env::Tabular(Arc::new(make_matrix_game_example2())),
            Self::Xor { n } => Env::Tabular(Arc::new(make_xor_team_game(*n)?)),
            Self::GridRendezvous(cfg) => Env::Tabular(Arc::new(make_grid_rendezvous_with(cfg)?)),
            Self::Random { n_agents, n_states, n_actions, gamma, seed } => {
                Env::Tabular(Arc::new(make_random_game(*n_agents, *n_states, n_actions, *gamma, *seed)?))
            }
            Self::TargetMatching { targets } => Env::TargetMatching(match targets {
                Some(t) => TargetMatchingGame::new(t.clone())?,
                None => TargetMatchingGame::default_two_agent(),
            }),
            Self::DiffGame => Env::Differentiable(make_diff_game()),
            Self::File { path } => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Env::Tabular(Arc::new(CooperativeMarkovGame::from_json(&text)?))
            }
        })
    }

    pub fn tabular(&self) -> anyhow::Result<Arc<CooperativeMarkovGame>> {
        match self.build()? {
            Env::Tabular(g) => Ok(g),
            _ => bail!("this command needs a tabular environment"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftChoice {
    Greedy,
    TrustRegion { delta: f64 },
    Clipped { eps: f64 },
}

impl DriftChoice {
    pub fn spec(&self) -> DriftSpec {
        match *self {
            Self::Greedy => DriftSpec::greedy(),
            Self::TrustRegion { delta } => DriftSpec::trust_region(delta),
            Self::Clipped { eps } => DriftSpec::clipped(eps),
        }
    }
}

/// Options of `exact-iter`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExactOptions {
    /// Mirror-learning drift for every agent; trust-region policy iteration when absent.
    pub drift: Option<DriftChoice>,
    /// Fixed agent order; a fresh uniform order each round when absent.
    pub order: Option<Vec<usize>>,
    /// Identical initial action distribution for every agent and state; uniform when absent.
    pub initial_row: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub algorithm: Option<Algorithm>,
    pub env: EnvSpec,
    #[serde(default)]
    pub scheme: Option<UpdateScheme>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub offpolicy: OffPolicyConfig,
    #[serde(default)]
    pub trust_region: TrustRegionConfig,
    #[serde(default)]
    pub exact: ExactOptions,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        self.train.validate()?;
        self.offpolicy.validate()?;
        self.trust_region.validate()?;
        Ok(())
    }

    /// On-policy settings with the run-level algorithm and scheme applied.
    pub fn on_policy(&self, algorithm: OnPolicyAlgorithm) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.algorithm = algorithm;
        if let Some(s) = self.scheme {
            cfg.scheme = s;
        }
        cfg
    }

    pub fn off_policy(&self, algorithm: OffPolicyAlgorithm) -> OffPolicyConfig {
        let mut cfg = self.offpolicy.clone();
        cfg.algorithm = algorithm;
        if let Some(s) = self.scheme {
            cfg.random_order = s == UpdateScheme::SequentialRandom;
        }
        cfg
    }
}
