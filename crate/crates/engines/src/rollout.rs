//! Feature tables, the joint actor, rollout collection and generalised advantage estimation.

use std::sync::Arc;

use harl_core::game::{CooperativeMarkovGame, EnvInstance};
use harl_core::TabularJointPolicy;
use harl_nn::mlp::{Activation, Mlp, MlpSpec};
use harl_nn::{CategoricalPolicy, StochasticPolicy};
use rand::Rng;

use crate::config::{Encoding, NetArch};
use crate::error::{EngineError, Result};

/// Largest feature table (states x width) the engines will materialise.
pub const MAX_FEATURE_ENTRIES: usize = 50_000_000;

/// Network inputs for every state of a game.
#[derive(Clone, Debug)]
pub struct FeatureTable {
    rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn new(game: &CooperativeMarkovGame, encoding: Encoding) -> Result<Self> {
        let n = game.n_states();
        let dim = match encoding {
            Encoding::OneHot => n,
            Encoding::Native => game.feature_dim(),
        };
        if n.saturating_mul(dim) > MAX_FEATURE_ENTRIES {
            return Err(EngineError::Config(format!("feature table of {n} x {dim} is too large")));
        }
        let rows = (0..n)
            .map(|s| match encoding {
                Encoding::OneHot => {
                    let mut v = vec![0.0; n];
                    v[s] = 1.0;
                    v
                }
                Encoding::Native => game.state_features(s),
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn get(&self, state: usize) -> &[f64] {
        &self.rows[state]
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }
}

pub fn build_net(arch: &NetArch, inputs: usize, outputs: usize, output_gain: f64, rng: &mut impl Rng) -> Result<Mlp> {
    Ok(match arch {
        NetArch::Tabular => {
            let layers = MlpSpec::linear(inputs, outputs).layers();
            Mlp::from_parts(layers, vec![0.0; inputs * outputs])?
        }
        NetArch::Mlp { hidden } => {
            let mut widths = vec![inputs];
            widths.extend(hidden);
            widths.push(outputs);
            let spec = MlpSpec::new(&widths)
                .hidden(Activation::Relu)
                .gains(std::f64::consts::SQRT_2, output_gain);
            Mlp::new(&spec, rng)?
        }
    })
}

/// Per-agent categorical policies, or a single shared one.
#[derive(Clone, Debug, PartialEq)]
pub struct JointActor {
    slots: Vec<CategoricalPolicy>,
    n_agents: usize,
    shared: bool,
}

impl JointActor {
    pub fn new(game: &CooperativeMarkovGame, dim: usize, arch: &NetArch, shared: bool, rng: &mut impl Rng) -> Result<Self> {
        let n = game.n_agents();
        let sizes = game.n_actions();
        if shared && sizes.iter().any(|&k| k != sizes[0]) {
            return Err(EngineError::Config("parameter sharing needs equal action counts".into()));
        }
        let count = if shared { 1 } else { n };
        let slots = (0..count)
            .map(|i| Ok(CategoricalPolicy::new(build_net(arch, dim, sizes[i], 0.01, rng)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { slots, n_agents: n, shared })
    }

    pub fn from_slots(slots: Vec<CategoricalPolicy>, n_agents: usize) -> Self {
        let shared = slots.len() == 1 && n_agents > 1;
        Self { slots, n_agents, shared }
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn slots(&self) -> &[CategoricalPolicy] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [CategoricalPolicy] {
        &mut self.slots
    }

    pub fn slot_of(&self, agent: usize) -> usize {
        if self.shared {
            0
        } else {
            agent
        }
    }

    pub fn policy(&self, agent: usize) -> &CategoricalPolicy {
        &self.slots[self.slot_of(agent)]
    }

    pub fn policy_mut(&mut self, agent: usize) -> &mut CategoricalPolicy {
        let k = self.slot_of(agent);
        &mut self.slots[k]
    }

    /// The stochastic joint policy this actor induces on every state.
    pub fn to_tabular(&self, game: &CooperativeMarkovGame, features: &FeatureTable) -> Result<TabularJointPolicy> {
        let policies = (0..self.n_agents)
            .map(|i| (0..game.n_states()).map(|s| self.policy(i).probs(features.get(s))).collect())
            .collect();
        let pi = TabularJointPolicy::new(policies);
        pi.validate(game)?;
        Ok(pi)
    }

    /// Deterministic argmax joint policy (lowest index on ties).
    pub fn greedy(&self, game: &CooperativeMarkovGame, features: &FeatureTable) -> Result<TabularJointPolicy> {
        let choices: Vec<Vec<usize>> = (0..self.n_agents)
            .map(|i| {
                (0..game.n_states())
                    .map(|s| argmax(&self.policy(i).probs(features.get(s))))
                    .collect()
            })
            .collect();
        Ok(TabularJointPolicy::deterministic(game, &choices))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// One round of on-policy samples, stored thread-major (`index = thread * steps + t`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub n_agents: usize,
    pub n_threads: usize,
    pub steps: usize,
    pub states: Vec<usize>,
    /// `actions[k * n_agents + i]`.
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<usize>,
    /// Time limit reached after this step.
    pub truncated: Vec<bool>,
    /// `old_log_probs[k * n_agents + i]` at collection parameters.
    pub old_log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// Value of the successor used for bootstrapping.
    pub next_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Undiscounted returns of episodes that finished during this batch.
    pub episode_returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn action(&self, k: usize, agent: usize) -> usize {
        self.actions[k * self.n_agents + agent]
    }

    pub fn old_log_prob(&self, k: usize, agent: usize) -> f64 {
        self.old_log_probs[k * self.n_agents + agent]
    }

    /// Fills `values`, `next_values`, `advantages` and `returns` from a state-value function.
    pub fn compute_advantages(&mut self, value: impl Fn(usize) -> f64, gamma: f64, lambda: f64) {
        self.values = self.states.iter().map(|&s| value(s)).collect();
        self.next_values = self.next_states.iter().map(|&s| value(s)).collect();
        let mut adv = vec![0.0; self.len()];
        for th in 0..self.n_threads {
            let lo = th * self.steps;
            let mut carry = 0.0;
            for k in (lo..lo + self.steps).rev() {
                let end = self.truncated[k] || k == lo + self.steps - 1;
                let delta = self.rewards[k] + gamma * self.next_values[k] - self.values[k];
                carry = delta + if end { 0.0 } else { gamma * lambda * carry };
                adv[k] = carry;
            }
        }
        self.returns = adv.iter().zip(&self.values).map(|(a, v)| a + v).collect();
        self.advantages = adv;
    }
}

/// Generalised advantage estimates for one episode segment. `values` carries one more entry than
/// `rewards`: the bootstrap value of the state after the last step (0 when terminal).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(values.len(), rewards.len() + 1, "values must include the bootstrap entry");
    let mut out = vec![0.0; rewards.len()];
    let mut carry = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        carry = delta + gamma * lambda * carry;
        out[t] = carry;
    }
    out
}

/// Seeded environment copies plus the running return of each.
pub struct EnvPool {
    envs: Vec<EnvInstance>,
    running: Vec<f64>,
}

impl EnvPool {
    pub fn new(game: Arc<CooperativeMarkovGame>, n: usize, seed: u64) -> Self {
        let envs = (0..n)
            .map(|k| EnvInstance::new(game.clone(), env_seed(seed, k)))
            .collect();
        Self { envs, running: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn game(&self) -> &CooperativeMarkovGame {
        self.envs[0].game()
    }
}

pub fn env_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1)
}

/// Runs every environment for `steps` steps under `actor`.
pub fn collect(
    pool: &mut EnvPool,
    actor: &JointActor,
    features: &FeatureTable,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<RolloutBatch> {
    let n = actor.n_agents();
    let threads = pool.len();
    let total = threads * steps;
    let mut b = RolloutBatch {
        n_agents: n,
        n_threads: threads,
        steps,
        states: Vec::with_capacity(total),
        actions: Vec::with_capacity(total * n),
        rewards: Vec::with_capacity(total),
        next_states: Vec::with_capacity(total),
        truncated: Vec::with_capacity(total),
        old_log_probs: Vec::with_capacity(total * n),
        ..Default::default()
    };
    let mut joint = vec![0; n];
    for (th, env) in pool.envs.iter_mut().enumerate() {
        for _ in 0..steps {
            let s = env.state();
            let x = features.get(s);
            for (i, a) in joint.iter_mut().enumerate() {
                let p = actor.policy(i).probs(x);
                *a = harl_nn::heads::sample_index(&p, rng);
                b.old_log_probs.push(p[*a].ln());
            }
            let out = env.step(&joint);
            b.states.push(s);
            b.actions.extend_from_slice(&joint);
            b.rewards.push(out.reward);
            b.next_states.push(out.next_state);
            b.truncated.push(out.truncated);
            pool.running[th] += out.reward;
            if out.truncated {
                b.episode_returns.push(pool.running[th]);
                pool.running[th] = 0.0;
                env.reset();
            }
        }
    }
    Ok(b)
}

/// Log-probabilities of the batch actions of `agent` under `policy`.
pub fn batch_log_probs(policy: &CategoricalPolicy, batch: &RolloutBatch, features: &FeatureTable, agent: usize) -> Vec<f64> {
    (0..batch.len())
        .map(|k| {
            let p = policy.probs(features.get(batch.states[k]));
            p[batch.action(k, agent)].max(f64::MIN_POSITIVE).ln()
        })
        .collect()
}

/// Mean `KL(old || new)` over the batch states.
pub fn batch_kl(old: &CategoricalPolicy, new: &CategoricalPolicy, batch: &RolloutBatch, features: &FeatureTable) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch
        .states
        .iter()
        .map(|&s| new.kl_from(old, features.get(s)))
        .sum::<f64>()
        / batch.len() as f64
}
