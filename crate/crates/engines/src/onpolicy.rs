//! Sample-based sequential-update training: HAPPO, HATRPO and HAA2C agent updates, the compound
//! ratio `M`, the centralised critic and the training loop.
//!
//! Logged surrogate values omit the constant `-mean(M)` that the objective carries in theory; it
//! has zero gradient.

use std::sync::Arc;
use std::time::Instant;

use harl_core::game::CooperativeMarkovGame;
use harl_core::oracle::evaluate;
use harl_nn::heads::softmax;
use harl_nn::mlp::Mlp;
use harl_nn::optim::{clip_grad_norm, huber, Adam};
use harl_nn::{CategoricalPolicy, StochasticPolicy};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{OnPolicyAlgorithm, TrainConfig, UpdateScheme};
use crate::error::{EngineError, Result};
use crate::rollout::{batch_log_probs, build_net, collect, EnvPool, FeatureTable, JointActor, RolloutBatch};

/// Per-sample compound ratio, seeded with the advantage estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct CompoundRatio {
    pub m: Vec<f64>,
}

impl CompoundRatio {
    pub fn new(advantages: &[f64], normalize: bool) -> Self {
        if !normalize || advantages.len() < 2 {
            return Self { m: advantages.to_vec() };
        }
        let n = advantages.len() as f64;
        let mean = advantages.iter().sum::<f64>() / n;
        let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        Self { m: advantages.iter().map(|a| (a - mean) / std).collect() }
    }

    /// `M <- (pi_new / pi_old) * M` at the batch samples.
    pub fn apply(&mut self, new_log_probs: &[f64], old_log_probs: &[f64]) {
        for ((m, n), o) in self.m.iter_mut().zip(new_log_probs).zip(old_log_probs) {
            *m *= (n - o).exp();
        }
    }
}

/// Clipped per-sample term `min(r M, clip(r, 1 +- eps) M)`.
pub fn happo_term(ratio: f64, m: f64, eps: f64) -> f64 {
    (ratio * m).min(ratio.clamp(1.0 - eps, 1.0 + eps) * m)
}

/// The samples one parameter set is trained on: (state, own action, log-prob at collection, M).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateSamples {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub m: Vec<f64>,
}

impl UpdateSamples {
    pub fn for_agent(batch: &RolloutBatch, agent: usize, m: &[f64]) -> Self {
        Self {
            states: batch.states.clone(),
            actions: (0..batch.len()).map(|k| batch.action(k, agent)).collect(),
            old_log_probs: (0..batch.len()).map(|k| batch.old_log_prob(k, agent)).collect(),
            m: m.to_vec(),
        }
    }

    /// Every (sample, agent) pair, all weighted by the same `m` of their sample.
    pub fn pooled(batch: &RolloutBatch, m: &[f64]) -> Self {
        let mut out = Self::default();
        for i in 0..batch.n_agents {
            let one = Self::for_agent(batch, i, m);
            out.states.extend(one.states);
            out.actions.extend(one.actions);
            out.old_log_probs.extend(one.old_log_probs);
            out.m.extend(one.m);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn ratio(&self, policy: &CategoricalPolicy, features: &FeatureTable, k: usize) -> f64 {
        let p = policy.probs(features.get(self.states[k]));
        (p[self.actions[k]].max(f64::MIN_POSITIVE).ln() - self.old_log_probs[k]).exp()
    }

    pub fn ratios(&self, policy: &CategoricalPolicy, features: &FeatureTable) -> Vec<f64> {
        (0..self.len()).map(|k| self.ratio(policy, features, k)).collect()
    }

    /// Mean of `M * r`.
    pub fn surrogate(&self, policy: &CategoricalPolicy, features: &FeatureTable) -> f64 {
        mean((0..self.len()).map(|k| self.m[k] * self.ratio(policy, features, k)), self.len())
    }

    pub fn mean_kl(&self, old: &CategoricalPolicy, new: &CategoricalPolicy, features: &FeatureTable) -> f64 {
        mean(self.states.iter().map(|&s| new.kl_from(old, features.get(s))), self.len())
    }
}

fn mean(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        it.sum::<f64>() / n as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentUpdateStats {
    pub kl_mean: f64,
    pub surrogate: f64,
    pub clip_frac: f64,
    pub hatrpo: Option<HatrpoReport>,
}

/// Adds the gradient of `coef * log pi(a | x) + entropy_coef * H(x)` into `grad`; returns the
/// probabilities.
fn add_score_and_entropy(
    policy: &CategoricalPolicy,
    x: &[f64],
    action: usize,
    coef: impl FnOnce(&[f64]) -> f64,
    entropy_coef: f64,
    grad: &mut [f64],
) -> Vec<f64> {
    let trace = policy.net.forward_trace(x);
    let p = softmax(trace.output());
    let c = coef(&p);
    let h: f64 = if entropy_coef > 0.0 {
        -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
    } else {
        0.0
    };
    let dz: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| {
            let score = c * (f64::from(k == action) - pk);
            let ent = if entropy_coef > 0.0 && pk > 0.0 { -entropy_coef * pk * (pk.ln() + h) } else { 0.0 };
            score + ent
        })
        .collect();
    if dz.iter().any(|&d| d != 0.0) {
        policy.net.backward(&trace, &dz, grad);
    }
    p
}

fn minibatches(n: usize, count: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let size = n.div_ceil(count);
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

fn check_finite(values: &[f64], what: &'static str, round: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EngineError::NonFinite { what, round })
    }
}

/// Gradient ascent on the clipped surrogate (`clip = Some(eps)`) or the plain ratio surrogate.
#[allow(clippy::too_many_arguments)]
fn ratio_ascent(
    policy: &mut CategoricalPolicy,
    opt: &mut Adam,
    samples: &UpdateSamples,
    features: &FeatureTable,
    clip: Option<f64>,
    epochs: usize,
    cfg: &TrainConfig,
    round: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let n_params = policy.n_params();
    for _ in 0..epochs {
        for mb in minibatches(samples.len(), cfg.num_mini_batch, rng) {
            let mut grad = vec![0.0; n_params];
            for &k in &mb {
                let m = samples.m[k];
                let a = samples.actions[k];
                let old = samples.old_log_probs[k];
                add_score_and_entropy(
                    policy,
                    features.get(samples.states[k]),
                    a,
                    |p| {
                        let r = (p[a].max(f64::MIN_POSITIVE).ln() - old).exp();
                        match clip {
                            Some(eps) if r * m > r.clamp(1.0 - eps, 1.0 + eps) * m => 0.0,
                            _ => m * r,
                        }
                    },
                    cfg.entropy_coef,
                    &mut grad,
                );
            }
            let scale = 1.0 / mb.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            check_finite(&grad, "actor gradient", round)?;
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            let mut params = policy.params().to_vec();
            opt.ascend(&mut params, &grad);
            policy.set_params(&params)?;
        }
    }
    Ok(())
}

fn ratio_stats(
    old: &CategoricalPolicy,
    new: &CategoricalPolicy,
    samples: &UpdateSamples,
    features: &FeatureTable,
    eps: f64,
    clipped_surrogate: bool,
) -> AgentUpdateStats {
    let r = samples.ratios(new, features);
    let n = samples.len();
    let surrogate = if clipped_surrogate {
        mean(r.iter().zip(&samples.m).map(|(&r, &m)| happo_term(r, m, eps)), n)
    } else {
        mean(r.iter().zip(&samples.m).map(|(r, m)| r * m), n)
    };
    AgentUpdateStats {
        kl_mean: samples.mean_kl(old, new, features),
        surrogate,
        clip_frac: mean(r.iter().map(|r| f64::from((r - 1.0).abs() > eps)), n),
        hatrpo: None,
    }
}

pub fn happo_agent_update(
    policy: &mut CategoricalPolicy,
    opt: &mut Adam,
    samples: &UpdateSamples,
    features: &FeatureTable,
    cfg: &TrainConfig,
    round: usize,
    rng: &mut impl Rng,
) -> Result<AgentUpdateStats> {
    let old = policy.clone();
    ratio_ascent(policy, opt, samples, features, Some(cfg.clip), cfg.ppo_epochs, cfg, round, rng)?;
    Ok(ratio_stats(&old, policy, samples, features, cfg.clip, true))
}

pub fn haa2c_agent_update(
    policy: &mut CategoricalPolicy,
    opt: &mut Adam,
    samples: &UpdateSamples,
    features: &FeatureTable,
    cfg: &TrainConfig,
    round: usize,
    rng: &mut impl Rng,
) -> Result<AgentUpdateStats> {
    let old = policy.clone();
    ratio_ascent(policy, opt, samples, features, None, cfg.a2c_epochs, cfg, round, rng)?;
    Ok(ratio_stats(&old, policy, samples, features, cfg.clip, false))
}

/// Outcome of conjugate gradient on `H x = b`.
#[derive(Clone, Debug, PartialEq)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// A search direction with non-positive curvature was met.
    pub breakdown: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn conjugate_gradient(apply: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], max_iters: usize, tol: f64) -> CgResult {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    let mut breakdown = false;
    while iterations < max_iters && rr.sqrt() >= tol {
        let hp = apply(&p);
        let curvature = dot(&p, &hp);
        if curvature <= 0.0 {
            breakdown = true;
            break;
        }
        let alpha = rr / curvature;
        for k in 0..x.len() {
            x[k] += alpha * p[k];
            r[k] -= alpha * hp[k];
        }
        let next = dot(&r, &r);
        let beta = next / rr;
        for k in 0..p.len() {
            p[k] = r[k] + beta * p[k];
        }
        rr = next;
        iterations += 1;
    }
    CgResult { x, iterations, residual: rr.sqrt(), breakdown }
}

/// Diagnostics of one trust-region agent step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HatrpoReport {
    pub cg_iterations: usize,
    pub cg_residual: f64,
    pub x_h_x: f64,
    pub beta: f64,
    /// `x . g`.
    pub x_dot_g: f64,
    /// Backtracking exponent of the accepted candidate.
    pub accepted: Option<usize>,
    /// Sampled surrogate gain of the accepted candidate.
    pub improvement: f64,
    /// `kappa * alpha^j * beta * x . g` at the accepted candidate.
    pub required_improvement: f64,
    pub kl: f64,
    pub skipped: Option<String>,
}

pub fn hatrpo_agent_update(
    policy: &mut CategoricalPolicy,
    samples: &UpdateSamples,
    features: &FeatureTable,
    cfg: &TrainConfig,
) -> Result<AgentUpdateStats> {
    let old = policy.clone();
    let n_params = policy.n_params();
    let mut g = vec![0.0; n_params];
    for k in 0..samples.len() {
        policy.add_grad_log_prob(features.get(samples.states[k]), &samples.actions[k], samples.m[k], &mut g)?;
    }
    let inv = 1.0 / samples.len().max(1) as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    let xs: Vec<Vec<f64>> = samples.states.iter().map(|&s| features.get(s).to_vec()).collect();
    let fvp = |v: &[f64]| old.fisher_vector_product(&xs, v).expect("direction has parameter length");
    let cg = conjugate_gradient(fvp, &g, cfg.cg_iters, cfg.cg_residual_tol);
    let hx = fvp(&cg.x);
    let x_h_x = dot(&cg.x, &hx);
    let x_dot_g = dot(&cg.x, &g);
    let mut report = HatrpoReport {
        cg_iterations: cg.iterations,
        cg_residual: cg.residual,
        x_h_x,
        x_dot_g,
        ..Default::default()
    };
    let base = samples.surrogate(&old, features);
    if !(x_h_x > 0.0) || !x_h_x.is_finite() {
        report.skipped = Some(format!("non-positive curvature {x_h_x:e}"));
    } else {
        let beta = (2.0 * cfg.kl_threshold / x_h_x).sqrt();
        report.beta = beta;
        let mut trial = old.clone();
        for j in 0..=cfg.ls_steps {
            let step = cfg.backtrack_coef.powi(j as i32) * beta;
            let params: Vec<f64> = old.params().iter().zip(&cg.x).map(|(p, x)| p + step * x).collect();
            trial.set_params(&params)?;
            let gain = samples.surrogate(&trial, features) - base;
            let kl = samples.mean_kl(&old, &trial, features);
            let required = cfg.accept_ratio * step * x_dot_g;
            if gain >= required && kl <= cfg.kl_threshold {
                report.accepted = Some(j);
                report.improvement = gain;
                report.required_improvement = required;
                report.kl = kl;
                policy.set_params(&params)?;
                break;
            }
        }
        if report.accepted.is_none() {
            report.skipped = Some("line search found no acceptable step".into());
        }
    }
    let mut stats = ratio_stats(&old, policy, samples, features, cfg.clip, false);
    stats.hatrpo = Some(report);
    Ok(stats)
}

/// Huber regression of `V(s)` onto the returns; returns the mean loss before the update.
pub fn critic_update(
    critic: &mut Mlp,
    opt: &mut Adam,
    states: &[usize],
    returns: &[f64],
    features: &FeatureTable,
    cfg: &TrainConfig,
    round: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let before = mean(
        states
            .iter()
            .zip(returns)
            .map(|(&s, &r)| huber(critic.forward(features.get(s))[0] - r, cfg.huber_delta).0),
        states.len(),
    );
    for _ in 0..cfg.critic_epochs {
        for mb in minibatches(states.len(), cfg.critic_mini_batch, rng) {
            let mut grad = vec![0.0; critic.n_params()];
            let scale = 1.0 / mb.len() as f64;
            for &k in &mb {
                let trace = critic.forward_trace(features.get(states[k]));
                let (_, d) = huber(trace.output()[0] - returns[k], cfg.huber_delta);
                critic.backward(&trace, &[d * scale], &mut grad);
            }
            check_finite(&grad, "critic gradient", round)?;
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            opt.step(critic.params_mut(), &grad);
        }
    }
    Ok(before)
}

/// One learning-curve row; one per agent update per round (`agent = "shared"` when pooled).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub round: usize,
    pub env_steps: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub agent: String,
    pub kl_mean: f64,
    pub surrogate: f64,
    pub clip_frac: f64,
}

pub const CURVE_COLUMNS: [&str; 8] =
    ["round", "env_steps", "return_mean", "return_std", "agent", "kl_mean", "surrogate", "clip_frac"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundReport {
    pub order: Vec<usize>,
    pub rows: Vec<CurveRow>,
    /// Wall-clock seconds of each agent update in `order` (one entry when shared).
    pub update_seconds: Vec<f64>,
    pub critic_loss: f64,
    pub stats: Vec<AgentUpdateStats>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub struct OnPolicyTrainer {
    pub game: Arc<CooperativeMarkovGame>,
    pub cfg: TrainConfig,
    pub features: FeatureTable,
    pub actor: JointActor,
    pub critic: Mlp,
    actor_opts: Vec<Adam>,
    critic_opt: Adam,
    pool: EnvPool,
    rng: ChaCha8Rng,
    pub env_steps: usize,
    pub round: usize,
    gamma: f64,
}

impl OnPolicyTrainer {
    pub fn new(game: Arc<CooperativeMarkovGame>, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = FeatureTable::new(&game, cfg.encoding)?;
        let shared = cfg.scheme == UpdateScheme::SharedParameter;
        let actor = JointActor::new(&game, features.dim(), &cfg.actor, shared, &mut rng)?;
        let critic = build_net(&cfg.critic, features.dim(), 1, 1.0, &mut rng)?;
        let actor_opts = actor
            .slots()
            .iter()
            .map(|p| Adam::new(p.n_params(), cfg.actor_lr).with_eps(cfg.optim_eps))
            .collect();
        let critic_opt = Adam::new(critic.n_params(), cfg.critic_lr).with_eps(cfg.optim_eps);
        let pool = EnvPool::new(game.clone(), cfg.n_threads, seed);
        let gamma = cfg.gamma.unwrap_or_else(|| game.gamma());
        Ok(Self { game, cfg, features, actor, critic, actor_opts, critic_opt, pool, rng, env_steps: 0, round: 0, gamma })
    }

    fn order(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.actor.n_agents()).collect();
        if self.cfg.scheme == UpdateScheme::SequentialRandom {
            order.shuffle(&mut self.rng);
        }
        order
    }

    fn update_slot(&mut self, slot: usize, samples: &UpdateSamples) -> Result<AgentUpdateStats> {
        let Self { actor, actor_opts, features, cfg, rng, round, .. } = self;
        let policy = &mut actor.slots_mut()[slot];
        match cfg.algorithm {
            OnPolicyAlgorithm::Happo => happo_agent_update(policy, &mut actor_opts[slot], samples, features, cfg, *round, rng),
            OnPolicyAlgorithm::Haa2c => haa2c_agent_update(policy, &mut actor_opts[slot], samples, features, cfg, *round, rng),
            OnPolicyAlgorithm::Hatrpo => hatrpo_agent_update(policy, samples, features, cfg),
        }
    }

    /// Collect, estimate advantages, update the agents under the configured scheme, fit the critic.
    pub fn step_round(&mut self) -> Result<RoundReport> {
        let mut batch = collect(&mut self.pool, &self.actor, &self.features, self.cfg.episode_length, &mut self.rng)?;
        self.env_steps += batch.len();
        let critic = &self.critic;
        let features = &self.features;
        batch.compute_advantages(|s| critic.forward(features.get(s))[0], self.gamma, self.cfg.gae_lambda);
        check_finite(&batch.advantages, "advantages", self.round)?;
        let (ret_mean, ret_std) = mean_std(&batch.episode_returns);
        let mut report = RoundReport::default();
        let row = |agent: String, st: &AgentUpdateStats, round: usize, env_steps: usize| CurveRow {
            round,
            env_steps,
            return_mean: ret_mean,
            return_std: ret_std,
            agent,
            kl_mean: st.kl_mean,
            surrogate: st.surrogate,
            clip_frac: st.clip_frac,
        };
        let base = CompoundRatio::new(&batch.advantages, self.cfg.normalize_advantages);
        if self.actor.is_shared() {
            let samples = UpdateSamples::pooled(&batch, &base.m);
            let t0 = Instant::now();
            let st = self.update_slot(0, &samples)?;
            report.update_seconds.push(t0.elapsed().as_secs_f64());
            report.rows.push(row("shared".into(), &st, self.round, self.env_steps));
            report.stats.push(st);
            report.order = (0..self.actor.n_agents()).collect();
        } else {
            let order = self.order();
            let mut m = base.clone();
            for &agent in &order {
                let weights = if self.cfg.scheme.is_sequential() { &m.m } else { &base.m };
                let samples = UpdateSamples::for_agent(&batch, agent, weights);
                let t0 = Instant::now();
                let st = self.update_slot(agent, &samples)?;
                report.update_seconds.push(t0.elapsed().as_secs_f64());
                if self.cfg.scheme.is_sequential() {
                    let new_lp = batch_log_probs(self.actor.policy(agent), &batch, &self.features, agent);
                    m.apply(&new_lp, &samples.old_log_probs);
                }
                report.rows.push(row(agent.to_string(), &st, self.round, self.env_steps));
                report.stats.push(st);
            }
            report.order = order;
        }
        let Self { critic, critic_opt, features, cfg, rng, round, .. } = self;
        report.critic_loss = critic_update(critic, critic_opt, &batch.states, &batch.returns, features, cfg, *round, rng)?;
        self.round += 1;
        Ok(report)
    }

    pub fn run(mut self) -> Result<TrainingRun> {
        let mut rows = Vec::new();
        let mut update_seconds = Vec::new();
        let mut orders = Vec::new();
        while self.env_steps + self.cfg.batch_size() <= self.cfg.total_env_steps.max(self.cfg.batch_size()) {
            let rep = self.step_round()?;
            rows.extend(rep.rows);
            update_seconds.push(rep.update_seconds);
            orders.push(rep.order);
        }
        Ok(TrainingRun {
            game: self.game,
            features: self.features,
            actor: self.actor,
            critic: self.critic,
            rows,
            update_seconds,
            orders,
            env_steps: self.env_steps,
        })
    }
}

/// Result of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub game: Arc<CooperativeMarkovGame>,
    pub features: FeatureTable,
    pub actor: JointActor,
    pub critic: Mlp,
    pub rows: Vec<CurveRow>,
    pub update_seconds: Vec<Vec<f64>>,
    pub orders: Vec<Vec<usize>>,
    pub env_steps: usize,
}

/// Exact returns of the learned joint policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactScore {
    /// Return of the stochastic policy as trained.
    pub stochastic: f64,
    /// Return of its per-state argmax.
    pub greedy: f64,
}

impl TrainingRun {
    pub fn exact_score(&self) -> Result<ExactScore> {
        let pi = self.actor.to_tabular(&self.game, &self.features)?;
        let greedy = self.actor.greedy(&self.game, &self.features)?;
        Ok(ExactScore { stochastic: evaluate(&self.game, &pi)?.j, greedy: evaluate(&self.game, &greedy)?.j })
    }
}

pub fn run_training(game: Arc<CooperativeMarkovGame>, cfg: &TrainConfig, seed: u64) -> Result<TrainingRun> {
    OnPolicyTrainer::new(game, cfg.clone(), seed)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Encoding;
    use harl_core::game::{make_xor_team_game, single_state_game};

    #[test]
    fn clipped_terms() {
        assert!((happo_term(1.5, 2.0, 0.2) - 2.4).abs() < 1e-15);
        assert!((happo_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        for &(r, m) in &[(0.3, 1.0), (1.7, -2.0), (1.0, 3.0), (1.1, -0.5)] {
            let t = happo_term(r, m, 0.2);
            assert!(t <= r * m && t <= r.clamp(0.8, 1.2) * m);
        }
    }

    #[test]
    fn conjugate_gradient_on_identity_returns_rhs() {
        let g = vec![0.3, -1.2, 2.0];
        let cg = conjugate_gradient(|v| v.to_vec(), &g, 10, 1e-12);
        assert_eq!(cg.iterations, 1);
        for k in 0..3 {
            assert!((cg.x[k] - g[k]).abs() < 1e-15);
        }
        assert!(cg.residual < 1e-12);
        // beta for delta = 0.01 and x'Hx = 2
        assert!(((2.0f64 * 0.01 / 2.0).sqrt() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn compound_ratio_is_exact_product() {
        let adv = vec![0.5, -1.0, 2.0];
        let mut m = CompoundRatio::new(&adv, false);
        let old = [(-0.7f64), -0.2, -1.5];
        let new1 = [(-0.5f64), -0.4, -1.0];
        let new2 = [(-0.9f64), -0.1, -1.6];
        m.apply(&new1, &old);
        m.apply(&new2, &old);
        for k in 0..3 {
            let expect = adv[k] * (new1[k] - old[k]).exp() * (new2[k] - old[k]).exp();
            assert!((m.m[k] - expect).abs() <= 1e-12 * expect.abs());
        }
        let norm = CompoundRatio::new(&adv, true);
        let (mu, sd) = mean_std(&norm.m);
        assert!(mu.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
    }

    fn bandit_fixture(m: f64) -> (CategoricalPolicy, UpdateSamples, FeatureTable) {
        let game = single_state_game(vec![2], |_| 0.0).unwrap();
        let feats = FeatureTable::new(&game, Encoding::OneHot).unwrap();
        let pol = CategoricalPolicy::tabular(1, 2);
        let samples = UpdateSamples {
            states: vec![0, 0],
            actions: vec![0, 1],
            old_log_probs: vec![0.5f64.ln(); 2],
            m: vec![m, 0.0],
        };
        (pol, samples, feats)
    }

    #[test]
    fn zero_update_objective_is_mean_m() {
        let (pol, samples, feats) = bandit_fixture(1.5);
        assert!((samples.surrogate(&pol, &feats) - 0.75).abs() < 1e-15);
        let r = samples.ratios(&pol, &feats);
        let clipped = mean(r.iter().zip(&samples.m).map(|(&r, &m)| happo_term(r, m, 0.2)), 2);
        assert!((clipped - 0.75).abs() < 1e-15);
    }

    #[test]
    fn haa2c_gradient_at_start_and_direction() {
        let (mut pol, samples, feats) = bandit_fixture(1.0);
        let cfg = TrainConfig { a2c_epochs: 1, entropy_coef: 0.0, actor_lr: 0.1, ..Default::default() };
        // analytic gradient at the start: mean(M grad log pi) = 0.5 * (0.5, -0.5)
        let mut g = vec![0.0; 2];
        add_score_and_entropy(&pol, &[1.0], 0, |_| 1.0, 0.0, &mut g);
        assert_eq!(g, vec![0.5, -0.5]);
        let mut opt = Adam::new(2, cfg.actor_lr);
        let before = pol.probs(&[1.0])[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        haa2c_agent_update(&mut pol, &mut opt, &samples, &feats, &cfg, 0, &mut rng).unwrap();
        assert!(pol.probs(&[1.0])[0] > before);
    }

    #[test]
    fn hatrpo_step_respects_constraints() {
        let (mut pol, samples, feats) = bandit_fixture(1.0);
        let cfg = TrainConfig { kl_threshold: 0.01, cg_iters: 50, ..Default::default() };
        let old = pol.clone();
        let st = hatrpo_agent_update(&mut pol, &samples, &feats, &cfg).unwrap();
        let rep = st.hatrpo.unwrap();
        assert!(rep.accepted.is_some(), "{rep:?}");
        assert!(rep.cg_residual < 1e-8);
        assert!(samples.mean_kl(&old, &pol, &feats) <= 0.01 + 1e-15);
        assert!(rep.improvement >= rep.required_improvement);
        assert!(pol.probs(&[1.0])[0] > 0.5);
    }

    #[test]
    fn training_is_deterministic_and_timed() {
        let game = Arc::new(make_xor_team_game(2).unwrap());
        let cfg = TrainConfig { n_threads: 4, episode_length: 8, total_env_steps: 320, ..Default::default() };
        let a = run_training(game.clone(), &cfg, 5).unwrap();
        let b = run_training(game, &cfg, 5).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.env_steps, 320);
        assert_eq!(a.update_seconds.len(), 10);
        assert!(a.update_seconds.iter().all(|r| r.len() == 2));
        assert_eq!(a.rows.len(), 20);
    }
}
