//! Off-policy training: HAD3QN on tabular games, HADDPG / HATD3 / MADDPG on the continuous
//! target-matching game.

use std::sync::Arc;

use harl_core::game::{CooperativeMarkovGame, EnvInstance, TargetMatchingGame};
use harl_core::oracle::evaluate;
use harl_core::TabularJointPolicy;
use harl_nn::heads::ActionBounds;
use harl_nn::mlp::{Activation, Mlp, MlpSpec};
use harl_nn::optim::{clip_grad_norm, Adam};
use harl_nn::{DeterministicPolicy, DuelingQ};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{Encoding, NetArch};
use crate::error::{EngineError, Result};
use crate::onpolicy::mean_std;
use crate::replay::{polyak, ReplayBuffer, Transition};
use crate::rollout::{argmax, env_seed, FeatureTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffPolicyAlgorithm {
    Haddpg,
    Hatd3,
    Had3qn,
    Maddpg,
}

impl OffPolicyAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Haddpg => "haddpg",
            Self::Hatd3 => "hatd3",
            Self::Had3qn => "had3qn",
            Self::Maddpg => "maddpg",
        }
    }
}

/// Defaults follow the common off-policy table of the reference hyperparameters; desk-scale runs
/// shrink the buffer, warmup and batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OffPolicyConfig {
    pub algorithm: OffPolicyAlgorithm,
    /// Fresh random agent order per update; fixed index order otherwise.
    pub random_order: bool,
    pub total_env_steps: usize,
    pub warmup_steps: usize,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub n_step: usize,
    pub gamma: Option<f64>,
    pub polyak: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub train_interval: usize,
    pub updates_per_train: usize,
    pub actor_epochs: usize,
    pub epsilon: f64,
    pub exploration_noise: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_delay: usize,
    pub critic_hidden: Vec<usize>,
    pub critic_activation: Activation,
    pub actor: NetArch,
    pub encoding: Encoding,
    pub max_grad_norm: f64,
    /// Emit curve rows every this many updates.
    pub log_every: usize,
}

impl Default for OffPolicyConfig {
    fn default() -> Self {
        Self {
            algorithm: OffPolicyAlgorithm::Hatd3,
            random_order: true,
            total_env_steps: 200_000,
            warmup_steps: 10_000,
            buffer_size: 1_000_000,
            batch_size: 1000,
            n_step: 1,
            gamma: None,
            polyak: 0.005,
            actor_lr: 5e-4,
            critic_lr: 1e-3,
            train_interval: 50,
            updates_per_train: 1,
            actor_epochs: 1,
            epsilon: 0.05,
            exploration_noise: 0.1,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            critic_hidden: vec![64, 64],
            critic_activation: Activation::Relu,
            actor: NetArch::Tabular,
            encoding: Encoding::OneHot,
            max_grad_norm: 10.0,
            log_every: 10,
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

impl OffPolicyConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.batch_size > 0 && self.buffer_size > 0, "batch and buffer must be non-empty")?;
        require(self.n_step > 0, "n_step must be positive")?;
        require(self.polyak > 0.0 && self.polyak <= 1.0, "polyak must lie in (0, 1]")?;
        require(self.train_interval > 0 && self.updates_per_train > 0, "train schedule must be positive")?;
        require(self.policy_delay > 0 && self.log_every > 0, "policy_delay and log_every must be positive")?;
        require((0.0..=1.0).contains(&self.epsilon), "epsilon must lie in [0, 1]")?;
        require(self.noise_clip >= 0.0 && self.policy_noise >= 0.0, "noise scales must be non-negative")?;
        require(self.actor_lr > 0.0 && self.critic_lr > 0.0, "learning rates must be positive")?;
        if let Some(g) = self.gamma {
            require((0.0..1.0).contains(&g), "gamma must lie in [0, 1)")?;
        }
        Ok(())
    }

    fn order(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.random_order {
            order.shuffle(rng);
        }
        order
    }
}

/// Off-policy learning-curve row: the on-policy columns plus critic diagnostics. Columns that do
/// not apply to deterministic or value-based agents (`kl_mean`, `clip_frac`) are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffPolicyRow {
    pub round: usize,
    pub env_steps: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub agent: String,
    pub kl_mean: f64,
    pub surrogate: f64,
    pub clip_frac: f64,
    pub critic_loss: f64,
    pub q_mean: f64,
}

pub const OFF_POLICY_COLUMNS: [&str; 10] = [
    "round",
    "env_steps",
    "return_mean",
    "return_std",
    "agent",
    "kl_mean",
    "surrogate",
    "clip_frac",
    "critic_loss",
    "q_mean",
];

/// Bellman target with clipped double-Q: `r + discount * min(q1, q2)` unless terminal.
pub fn td3_target(reward: f64, discount: f64, terminal: bool, q1: f64, q2: f64) -> f64 {
    reward + if terminal { 0.0 } else { discount * q1.min(q2) }
}

/// Target-smoothing noise for a raw normal draw.
pub fn smoothing_noise(draw: f64, clip: f64) -> f64 {
    draw.clamp(-clip, clip)
}

/// Whether the actors and targets update at `round` under a policy delay.
pub fn actor_update_due(round: usize, delay: usize) -> bool {
    round.is_multiple_of(delay)
}

/// Probability that epsilon-greedy picks the greedy action among `n` actions.
pub fn greedy_probability(epsilon: f64, n: usize) -> f64 {
    1.0 - epsilon + epsilon / n as f64
}

fn epsilon_greedy(q: &[f64], epsilon: f64, rng: &mut impl Rng) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..q.len())
    } else {
        argmax(q)
    }
}

#[derive(Default)]
struct EpisodeStats {
    running: f64,
    finished: Vec<f64>,
}

impl EpisodeStats {
    fn add(&mut self, r: f64, end: bool) {
        self.running += r;
        if end {
            self.finished.push(self.running);
            self.running = 0.0;
        }
    }

    fn drain(&mut self) -> (f64, f64) {
        let out = mean_std(&self.finished);
        self.finished.clear();
        out
    }
}

/// HAD3QN: a dueling global critic over joint actions plus one dueling net per agent over its own
/// actions, trained by sequential greedy targets through the global critic.
pub struct Had3qnTrainer {
    pub game: Arc<CooperativeMarkovGame>,
    pub cfg: OffPolicyConfig,
    pub features: FeatureTable,
    pub global: DuelingQ,
    global_target: DuelingQ,
    pub locals: Vec<DuelingQ>,
    local_targets: Vec<DuelingQ>,
    global_opt: Adam,
    local_opts: Vec<Adam>,
    buffer: ReplayBuffer<Vec<usize>>,
    env: EnvInstance,
    rng: ChaCha8Rng,
    gamma: f64,
    pub env_steps: usize,
    pub round: usize,
    episodes: EpisodeStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Had3qnUpdate {
    pub global_loss: f64,
    pub global_q: f64,
    pub local_loss: f64,
    pub local_q: f64,
}

impl Had3qnTrainer {
    pub fn new(game: Arc<CooperativeMarkovGame>, cfg: OffPolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = FeatureTable::new(&game, cfg.encoding)?;
        let mut widths = vec![features.dim()];
        if let NetArch::Mlp { hidden } = &cfg.actor {
            widths.extend(hidden);
        }
        let global = DuelingQ::new(&widths, game.n_joint(), Activation::Relu, &mut rng)?;
        let locals = game
            .n_actions()
            .iter()
            .map(|&k| DuelingQ::new(&widths, k, Activation::Relu, &mut rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let global_opt = Adam::new(global.net.n_params(), cfg.critic_lr);
        let local_opts = locals.iter().map(|q| Adam::new(q.net.n_params(), cfg.actor_lr)).collect();
        let env = EnvInstance::new(game.clone(), env_seed(seed, 0));
        let gamma = cfg.gamma.unwrap_or_else(|| game.gamma());
        Ok(Self {
            global_target: global.clone(),
            local_targets: locals.clone(),
            buffer: ReplayBuffer::new(cfg.buffer_size, cfg.n_step),
            game,
            cfg,
            features,
            global,
            locals,
            global_opt,
            local_opts,
            env,
            rng,
            gamma,
            env_steps: 0,
            round: 0,
            episodes: EpisodeStats::default(),
        })
    }

    fn act(&mut self) -> Vec<usize> {
        let x = self.features.get(self.env.state());
        let warm = self.env_steps < self.cfg.warmup_steps;
        let mut actions = Vec::with_capacity(self.locals.len());
        for q in &self.locals {
            let a = if warm {
                self.rng.random_range(0..q.n_actions())
            } else {
                epsilon_greedy(&q.q_values(x), self.cfg.epsilon, &mut self.rng)
            };
            actions.push(a);
        }
        actions
    }

    pub fn env_step(&mut self) {
        let s = self.env.state();
        let actions = self.act();
        let out = self.env.step(&actions);
        self.episodes.add(out.reward, out.truncated);
        self.buffer.push(Transition {
            state: s,
            actions,
            reward: out.reward,
            next_state: out.next_state,
            done: false,
            truncated: out.truncated,
        });
        if out.truncated {
            self.env.reset();
        }
        self.env_steps += 1;
    }

    pub fn update(&mut self) -> Result<Had3qnUpdate> {
        let n = self.locals.len();
        let idx = self.buffer.sample_indices(self.cfg.batch_size, &mut self.rng);
        let b = idx.len() as f64;
        let joint = self.game.joint().clone();
        let mut out = Had3qnUpdate::default();

        // global critic towards r + discount * Q_target(s', argmax of local targets)
        let mut grad = vec![0.0; self.global.net.n_params()];
        for &i in &idx {
            let t = self.buffer.get(i);
            let ns = self.buffer.n_step_return(i, self.gamma);
            let y = if ns.terminal {
                ns.reward
            } else {
                let xn = self.features.get(ns.next_state);
                let best: Vec<usize> = self.local_targets.iter().map(|q| argmax(&q.q_values(xn))).collect();
                ns.reward + ns.discount * self.global_target.q_values(xn)[joint.encode(&best)]
            };
            let j = joint.encode(&t.actions);
            let x = self.features.get(t.state);
            let mut gq = vec![0.0; joint.len()];
            let q = self.global.q_values(x)[j];
            gq[j] = (q - y) / b;
            self.global.add_grad(x, &gq, &mut grad);
            out.global_loss += 0.5 * (q - y).powi(2) / b;
            out.global_q += q / b;
        }
        clip_grad_norm(&mut grad, self.cfg.max_grad_norm);
        self.global_opt.step(self.global.net.params_mut(), &grad);

        // sequential local targets through the updated global critic
        let order = self.cfg.order(n, &mut self.rng);
        let mut current: Vec<Vec<usize>> = idx.iter().map(|&i| self.buffer.get(i).actions.clone()).collect();
        let q_tables: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| self.global.q_values(self.features.get(self.buffer.get(i).state)))
            .collect();
        for &agent in &order {
            let mut grad = vec![0.0; self.locals[agent].net.n_params()];
            for (k, &i) in idx.iter().enumerate() {
                let t = self.buffer.get(i);
                let x = self.features.get(t.state);
                let y = q_tables[k][joint.encode(&current[k])];
                let own = t.actions[agent];
                let q = self.locals[agent].q_values(x)[own];
                let mut gq = vec![0.0; self.locals[agent].n_actions()];
                gq[own] = (q - y) / b;
                self.locals[agent].add_grad(x, &gq, &mut grad);
                out.local_loss += 0.5 * (q - y).powi(2) / (b * n as f64);
                out.local_q += q / (b * n as f64);
                // greedy choice for this agent given the prefix's greedy choices and the rest as sampled
                let mut best = (f64::NEG_INFINITY, 0);
                for a in 0..self.game.n_actions()[agent] {
                    current[k][agent] = a;
                    let v = q_tables[k][joint.encode(&current[k])];
                    if v > best.0 {
                        best = (v, a);
                    }
                }
                current[k][agent] = best.1;
            }
            clip_grad_norm(&mut grad, self.cfg.max_grad_norm);
            self.local_opts[agent].step(self.locals[agent].net.params_mut(), &grad);
        }
        for v in [out.global_loss, out.local_loss] {
            if !v.is_finite() {
                return Err(EngineError::NonFinite { what: "q loss", round: self.round });
            }
        }
        polyak(self.global_target.net.params_mut(), self.global.net.params(), self.cfg.polyak);
        for (t, o) in self.local_targets.iter_mut().zip(&self.locals) {
            polyak(t.net.params_mut(), o.net.params(), self.cfg.polyak);
        }
        self.round += 1;
        Ok(out)
    }

    pub fn run(mut self) -> Result<Had3qnRun> {
        let mut rows = Vec::new();
        while self.env_steps < self.cfg.total_env_steps {
            self.env_step();
            if self.env_steps >= self.cfg.warmup_steps && self.env_steps.is_multiple_of(self.cfg.train_interval) {
                for _ in 0..self.cfg.updates_per_train {
                    let u = self.update()?;
                    if self.round.is_multiple_of(self.cfg.log_every) {
                        let (m, s) = self.episodes.drain();
                        rows.push(OffPolicyRow {
                            round: self.round,
                            env_steps: self.env_steps,
                            return_mean: m,
                            return_std: s,
                            agent: "all".into(),
                            kl_mean: f64::NAN,
                            surrogate: u.local_q,
                            clip_frac: f64::NAN,
                            critic_loss: u.global_loss,
                            q_mean: u.global_q,
                        });
                    }
                }
            }
        }
        Ok(Had3qnRun { game: self.game, features: self.features, locals: self.locals, global: self.global, rows, env_steps: self.env_steps })
    }
}

pub struct Had3qnRun {
    pub game: Arc<CooperativeMarkovGame>,
    pub features: FeatureTable,
    pub locals: Vec<DuelingQ>,
    pub global: DuelingQ,
    pub rows: Vec<OffPolicyRow>,
    pub env_steps: usize,
}

impl Had3qnRun {
    /// Greedy decentralised joint policy of the per-agent nets.
    pub fn greedy_policy(&self) -> TabularJointPolicy {
        let choices: Vec<Vec<usize>> = self
            .locals
            .iter()
            .map(|q| (0..self.game.n_states()).map(|s| argmax(&q.q_values(self.features.get(s)))).collect())
            .collect();
        TabularJointPolicy::deterministic(&self.game, &choices)
    }

    pub fn exact_return(&self) -> Result<f64> {
        Ok(evaluate(&self.game, &self.greedy_policy())?.j)
    }
}

pub fn run_had3qn(game: Arc<CooperativeMarkovGame>, cfg: &OffPolicyConfig, seed: u64) -> Result<Had3qnRun> {
    if cfg.algorithm != OffPolicyAlgorithm::Had3qn {
        return Err(EngineError::Config(format!("{} is not a discrete-action algorithm", cfg.algorithm.name())));
    }
    Had3qnTrainer::new(game, cfg.clone(), seed)?.run()
}

/// A critic over concatenated per-agent actions that exposes its action gradient.
pub trait ActionCritic {
    fn q_and_action_grad(&self, x: &[f64], actions: &[f64]) -> (f64, Vec<f64>);
}

/// An MLP critic over `[state features, actions]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpCritic {
    pub net: Mlp,
}

impl MlpCritic {
    pub fn input(x: &[f64], actions: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(x.len() + actions.len());
        v.extend_from_slice(x);
        v.extend_from_slice(actions);
        v
    }

    pub fn q(&self, x: &[f64], actions: &[f64]) -> f64 {
        self.net.forward(&Self::input(x, actions))[0]
    }
}

impl ActionCritic for MlpCritic {
    fn q_and_action_grad(&self, x: &[f64], actions: &[f64]) -> (f64, Vec<f64>) {
        let trace = self.net.forward_trace(&Self::input(x, actions));
        let gin = self.net.input_grad(&trace, &[1.0]);
        (trace.output()[0], gin[x.len()..].to_vec())
    }
}

/// Offsets of each agent's slice in the concatenated action vector.
fn action_offsets(actors: &[DeterministicPolicy]) -> Vec<usize> {
    let mut off = vec![0];
    for a in actors {
        off.push(off.last().unwrap() + a.bounds.dim());
    }
    off
}

/// One actor phase. Agents ascend `Q(s, ...)` one at a time in `order`. With `sequential`, agents
/// earlier in the order enter the critic with their freshly updated actions; otherwise every other
/// agent keeps its action from before the phase. Returns the mean critic value seen by each agent
/// in `order`.
#[allow(clippy::too_many_arguments)]
pub fn actor_phase(
    actors: &mut [DeterministicPolicy],
    opts: &mut [Adam],
    critic: &dyn ActionCritic,
    states: &[Vec<f64>],
    order: &[usize],
    sequential: bool,
    epochs: usize,
    max_grad_norm: f64,
) -> Vec<f64> {
    let off = action_offsets(actors);
    let joint = |actors: &[DeterministicPolicy], x: &[f64]| -> Vec<f64> { actors.iter().flat_map(|a| a.act(x)).collect() };
    let before: Vec<Vec<f64>> = states.iter().map(|x| joint(actors, x)).collect();
    let mut seen = Vec::with_capacity(order.len());
    for &agent in order {
        let mut q_sum = 0.0;
        for _ in 0..epochs.max(1) {
            q_sum = 0.0;
            let mut grad = vec![0.0; actors[agent].net.n_params()];
            for (k, x) in states.iter().enumerate() {
                let mut a = if sequential { joint(actors, x) } else { before[k].clone() };
                let own = actors[agent].act(x);
                a[off[agent]..off[agent + 1]].copy_from_slice(&own);
                let (q, dq) = critic.q_and_action_grad(x, &a);
                q_sum += q;
                let scale = 1.0 / states.len() as f64;
                let g: Vec<f64> = dq[off[agent]..off[agent + 1]].iter().map(|v| v * scale).collect();
                actors[agent].add_vjp(x, &g, &mut grad);
            }
            clip_grad_norm(&mut grad, max_grad_norm);
            opts[agent].ascend(actors[agent].net.params_mut(), &grad);
        }
        seen.push(q_sum / states.len().max(1) as f64);
    }
    seen
}

/// HADDPG, HATD3 and the MADDPG baseline on [`TargetMatchingGame`].
pub struct ContinuousTrainer {
    pub game: TargetMatchingGame,
    pub cfg: OffPolicyConfig,
    pub actors: Vec<DeterministicPolicy>,
    actor_targets: Vec<DeterministicPolicy>,
    pub critics: Vec<MlpCritic>,
    critic_targets: Vec<MlpCritic>,
    actor_opts: Vec<Adam>,
    critic_opts: Vec<Adam>,
    buffer: ReplayBuffer<Vec<f64>>,
    rng: ChaCha8Rng,
    gamma: f64,
    pub env_steps: usize,
    pub round: usize,
    episodes: EpisodeStats,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContinuousUpdate {
    pub critic_loss: f64,
    pub q_mean: f64,
    /// Mean critic value per agent in update order; empty when the actors were not due.
    pub actor_q: Vec<(usize, f64)>,
}

impl ContinuousTrainer {
    pub fn new(game: TargetMatchingGame, cfg: OffPolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.algorithm == OffPolicyAlgorithm::Had3qn {
            return Err(EngineError::Config("had3qn needs a discrete-action game".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = game.n_agents();
        let dim = game.n_contexts();
        let actor_spec = match &cfg.actor {
            NetArch::Tabular => MlpSpec::linear(dim, 1).gains(1.0, 0.01),
            NetArch::Mlp { hidden } => {
                let mut w = vec![dim];
                w.extend(hidden);
                w.push(1);
                MlpSpec::new(&w).gains(std::f64::consts::SQRT_2, 0.01)
            }
        };
        let actors = (0..n)
            .map(|_| DeterministicPolicy::new(&actor_spec, ActionBounds::symmetric(1, 1.0), &mut rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut widths = vec![dim + n];
        widths.extend(&cfg.critic_hidden);
        widths.push(1);
        let critic_spec = MlpSpec::new(&widths).hidden(cfg.critic_activation);
        let n_critics = if cfg.algorithm == OffPolicyAlgorithm::Hatd3 { 2 } else { 1 };
        let critics = (0..n_critics)
            .map(|_| Ok(MlpCritic { net: Mlp::new(&critic_spec, &mut rng)? }))
            .collect::<Result<Vec<_>>>()?;
        let actor_opts = actors.iter().map(|a| Adam::new(a.net.n_params(), cfg.actor_lr)).collect();
        let critic_opts = critics.iter().map(|c| Adam::new(c.net.n_params(), cfg.critic_lr)).collect();
        let gamma = cfg.gamma.unwrap_or(0.99);
        Ok(Self {
            actor_targets: actors.clone(),
            critic_targets: critics.clone(),
            buffer: ReplayBuffer::new(cfg.buffer_size, cfg.n_step),
            game,
            cfg,
            actors,
            critics,
            actor_opts,
            critic_opts,
            rng,
            gamma,
            env_steps: 0,
            round: 0,
            episodes: EpisodeStats::default(),
        })
    }

    fn context_features(&self, c: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.game.n_contexts()];
        x[c] = 1.0;
        x
    }

    pub fn env_step(&mut self) {
        let c = self.rng.random_range(0..self.game.n_contexts());
        let x = self.context_features(c);
        let warm = self.env_steps < self.cfg.warmup_steps;
        let mut actions = Vec::with_capacity(self.actors.len());
        for a in &self.actors {
            let mu = a.act(&x);
            for (d, m) in mu.iter().enumerate() {
                let v = if warm {
                    self.rng.random_range(a.bounds.low[d]..=a.bounds.high[d])
                } else {
                    let noise: f64 = self.rng.sample(StandardNormal);
                    (m + self.cfg.exploration_noise * noise).clamp(a.bounds.low[d], a.bounds.high[d])
                };
                actions.push(v);
            }
        }
        let r = self.game.reward(c, &actions);
        self.episodes.add(r, true);
        self.buffer.push(Transition { state: c, actions, reward: r, next_state: c, done: true, truncated: false });
        self.env_steps += 1;
    }

    pub fn update(&mut self) -> Result<ContinuousUpdate> {
        let idx = self.buffer.sample_indices(self.cfg.batch_size, &mut self.rng);
        let b = idx.len() as f64;
        let twin = self.critics.len() == 2;
        let mut out = ContinuousUpdate::default();
        let mut targets = Vec::with_capacity(idx.len());
        for &i in &idx {
            let ns = self.buffer.n_step_return(i, self.gamma);
            let y = if ns.terminal {
                ns.reward
            } else {
                let xn = self.context_features(ns.next_state);
                let mut an = Vec::new();
                for a in &self.actor_targets {
                    for (d, m) in a.act(&xn).iter().enumerate() {
                        let v = if twin {
                            let draw: f64 = self.rng.sample::<f64, _>(StandardNormal) * self.cfg.policy_noise;
                            m + smoothing_noise(draw, self.cfg.noise_clip)
                        } else {
                            *m
                        };
                        an.push(v.clamp(a.bounds.low[d], a.bounds.high[d]));
                    }
                }
                let q1 = self.critic_targets[0].q(&xn, &an);
                let q2 = if twin { self.critic_targets[1].q(&xn, &an) } else { q1 };
                td3_target(ns.reward, ns.discount, false, q1, q2)
            };
            targets.push(y);
        }
        for (c, (critic, opt)) in self.critics.iter_mut().zip(&mut self.critic_opts).enumerate() {
            let mut grad = vec![0.0; critic.net.n_params()];
            for (k, &i) in idx.iter().enumerate() {
                let t = self.buffer.get(i);
                let mut xin = vec![0.0; self.game.n_contexts()];
                xin[t.state] = 1.0;
                xin.extend_from_slice(&t.actions);
                let trace = critic.net.forward_trace(&xin);
                let q = trace.output()[0];
                critic.net.backward(&trace, &[(q - targets[k]) / b], &mut grad);
                if c == 0 {
                    out.critic_loss += 0.5 * (q - targets[k]).powi(2) / b;
                    out.q_mean += q / b;
                }
            }
            clip_grad_norm(&mut grad, self.cfg.max_grad_norm);
            opt.step(critic.net.params_mut(), &grad);
        }
        if !out.critic_loss.is_finite() {
            return Err(EngineError::NonFinite { what: "critic loss", round: self.round });
        }
        let delay = if twin { self.cfg.policy_delay } else { 1 };
        if actor_update_due(self.round, delay) {
            let states: Vec<Vec<f64>> = idx.iter().map(|&i| self.context_features(self.buffer.get(i).state)).collect();
            let order = self.cfg.order(self.actors.len(), &mut self.rng);
            let sequential = self.cfg.algorithm != OffPolicyAlgorithm::Maddpg;
            let seen = actor_phase(
                &mut self.actors,
                &mut self.actor_opts,
                &self.critics[0],
                &states,
                &order,
                sequential,
                self.cfg.actor_epochs,
                self.cfg.max_grad_norm,
            );
            out.actor_q = order.iter().copied().zip(seen).collect();
            for (t, o) in self.actor_targets.iter_mut().zip(&self.actors) {
                polyak(t.net.params_mut(), o.net.params(), self.cfg.polyak);
            }
            for (t, o) in self.critic_targets.iter_mut().zip(&self.critics) {
                polyak(t.net.params_mut(), o.net.params(), self.cfg.polyak);
            }
        }
        self.round += 1;
        Ok(out)
    }

    /// Mean reward of the deterministic joint policy over all contexts.
    pub fn greedy_return(&self) -> f64 {
        (0..self.game.n_contexts())
            .map(|c| {
                let x = self.context_features(c);
                let a: Vec<f64> = self.actors.iter().flat_map(|p| p.act(&x)).collect();
                self.game.reward(c, &a)
            })
            .sum::<f64>()
            / self.game.n_contexts() as f64
    }

    pub fn run(mut self) -> Result<ContinuousRun> {
        let mut rows = Vec::new();
        // critic value seen by each agent at its latest actor update
        let mut last_q = vec![f64::NAN; self.actors.len()];
        while self.env_steps < self.cfg.total_env_steps {
            self.env_step();
            if self.env_steps >= self.cfg.warmup_steps && self.env_steps.is_multiple_of(self.cfg.train_interval) {
                for _ in 0..self.cfg.updates_per_train {
                    let u = self.update()?;
                    for &(agent, q) in &u.actor_q {
                        last_q[agent] = q;
                    }
                    if self.round.is_multiple_of(self.cfg.log_every) {
                        let (m, s) = self.episodes.drain();
                        for (agent, &q) in last_q.iter().enumerate() {
                            rows.push(OffPolicyRow {
                                round: self.round,
                                env_steps: self.env_steps,
                                return_mean: m,
                                return_std: s,
                                agent: agent.to_string(),
                                kl_mean: f64::NAN,
                                surrogate: q,
                                clip_frac: f64::NAN,
                                critic_loss: u.critic_loss,
                                q_mean: u.q_mean,
                            });
                        }
                    }
                }
            }
        }
        let final_return = self.greedy_return();
        Ok(ContinuousRun { final_return, actors: self.actors, critics: self.critics, rows, env_steps: self.env_steps })
    }
}

pub struct ContinuousRun {
    /// Mean reward of the deterministic policy over contexts; the optimum is 0.
    pub final_return: f64,
    pub actors: Vec<DeterministicPolicy>,
    pub critics: Vec<MlpCritic>,
    pub rows: Vec<OffPolicyRow>,
    pub env_steps: usize,
}

pub fn run_continuous(game: TargetMatchingGame, cfg: &OffPolicyConfig, seed: u64) -> Result<ContinuousRun> {
    ContinuousTrainer::new(game, cfg.clone(), seed)?.run()
}
