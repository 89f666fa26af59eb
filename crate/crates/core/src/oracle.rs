//! Exact evaluation of joint policies on tabular games.
//!
//! Visitation `rho` is the improper discounted state distribution: it solves
//! `rho = d + gamma * P_pi^T rho` and carries total mass `1 / (1 - gamma)`.
//! Every expectation "over rho" in this crate is the corresponding
//! unnormalised sum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::CooperativeMarkovGame;

/// Probability rows must sum to one within this.
pub const POLICY_TOLERANCE: f64 = 1e-12;
/// Linear-solve residual bound for [`evaluate`].
pub const EVAL_RESIDUAL: f64 = 1e-10;
/// Above this many states [`evaluate`] switches from a dense LU solve to Gauss-Seidel.
pub const DENSE_STATE_LIMIT: usize = 3_000;

const VALUE_ITERATION_TOL: f64 = 1e-12;
const VALUE_ITERATION_CAP: usize = 1_000_000;

/// Per-agent stochastic policy tables, indexed `[agent][state][action]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularJointPolicy {
    pub policies: Vec<Vec<Vec<f64>>>,
}

impl TabularJointPolicy {
    pub fn new(policies: Vec<Vec<Vec<f64>>>) -> Self {
        Self { policies }
    }

    pub fn uniform(game: &CooperativeMarkovGame) -> Self {
        let policies = game
            .n_actions()
            .iter()
            .map(|&na| vec![vec![1.0 / na as f64; na]; game.n_states()])
            .collect();
        Self { policies }
    }

    /// Every agent plays the same state-independent row `row_for(agent)`.
    pub fn stationary(game: &CooperativeMarkovGame, row_for: impl Fn(usize) -> Vec<f64>) -> Self {
        let policies = (0..game.n_agents())
            .map(|i| vec![row_for(i); game.n_states()])
            .collect();
        Self { policies }
    }

    /// Deterministic policy from a per-agent, per-state action table.
    pub fn deterministic(game: &CooperativeMarkovGame, actions: &[Vec<usize>]) -> Self {
        let policies = actions
            .iter()
            .zip(game.n_actions())
            .map(|(per_state, &na)| {
                per_state
                    .iter()
                    .map(|&a| {
                        let mut row = vec![0.0; na];
                        row[a] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        Self { policies }
    }

    pub fn n_agents(&self) -> usize {
        self.policies.len()
    }

    pub fn row(&self, agent: usize, state: usize) -> &[f64] {
        &self.policies[agent][state]
    }

    pub fn agent(&self, agent: usize) -> &[Vec<f64>] {
        &self.policies[agent]
    }

    pub fn set_agent(&mut self, agent: usize, rows: Vec<Vec<f64>>) {
        self.policies[agent] = rows;
    }

    pub fn with_agent(&self, agent: usize, rows: Vec<Vec<f64>>) -> Self {
        let mut out = self.clone();
        out.set_agent(agent, rows);
        out
    }

    /// Probability of joint index `joint` in `state`.
    pub fn joint_prob(&self, game: &CooperativeMarkovGame, state: usize, joint: usize) -> f64 {
        (0..self.n_agents())
            .map(|i| self.policies[i][state][game.joint().action_of(joint, i)])
            .product()
    }

    pub fn validate(&self, game: &CooperativeMarkovGame) -> Result<()> {
        if self.policies.len() != game.n_agents() {
            return Err(Error::InvalidPolicy(format!(
                "policy covers {} agents, game has {}",
                self.policies.len(),
                game.n_agents()
            )));
        }
        for (i, per_state) in self.policies.iter().enumerate() {
            if per_state.len() != game.n_states() {
                return Err(Error::InvalidPolicy(format!("agent {i} has {} state rows", per_state.len())));
            }
            for (s, row) in per_state.iter().enumerate() {
                validate_row(row, game.n_actions()[i])
                    .map_err(|m| Error::InvalidPolicy(format!("agent {i}, state {s}: {m}")))?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub(crate) fn validate_row(row: &[f64], n_actions: usize) -> std::result::Result<(), String> {
    if row.len() != n_actions {
        return Err(format!("row has {} entries, expected {n_actions}", row.len()));
    }
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err("row has a negative or non-finite entry".into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > POLICY_TOLERANCE {
        return Err(format!("row sums to {sum}"));
    }
    Ok(())
}

/// Exact values of a fixed joint policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueProfile {
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    /// `Q[s][joint]`
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    #[serde(rename = "J")]
    pub j: f64,
}

impl ValueProfile {
    pub fn advantage(&self, state: usize, joint: usize) -> f64 {
        self.q[state][joint] - self.v[state]
    }

    pub fn max_abs_advantage(&self) -> f64 {
        self.q
            .iter()
            .zip(&self.v)
            .flat_map(|(row, v)| row.iter().map(move |q| (q - v).abs()))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Policy-averaged kernel as sparse rows, plus the policy-averaged reward.
fn policy_kernel(game: &CooperativeMarkovGame, policy: &TabularJointPolicy) -> (Vec<Vec<(usize, f64)>>, Vec<f64>) {
    let ns = game.n_states();
    let mut scratch = vec![0.0; ns];
    let mut touched = Vec::new();
    let mut rows = Vec::with_capacity(ns);
    let mut r_pi = vec![0.0; ns];
    for s in 0..ns {
        for j in 0..game.n_joint() {
            let w = policy.joint_prob(game, s, j);
            if w == 0.0 {
                continue;
            }
            r_pi[s] += w * game.reward(s, j);
            for (s2, &p) in game.transition_row(s, j).iter().enumerate() {
                if p != 0.0 {
                    if scratch[s2] == 0.0 {
                        touched.push(s2);
                    }
                    scratch[s2] += w * p;
                }
            }
        }
        touched.sort_unstable();
        let row = touched.iter().map(|&s2| (s2, scratch[s2])).collect();
        for &s2 in &touched {
            scratch[s2] = 0.0;
        }
        touched.clear();
        rows.push(row);
    }
    (rows, r_pi)
}

/// Solves `x - gamma * K x = b` (or with `K^T` when `transpose`), K given by sparse rows.
fn solve_discounted(rows: &[Vec<(usize, f64)>], gamma: f64, b: &[f64], transpose: bool) -> Result<Vec<f64>> {
    let n = b.len();
    let residual = |x: &[f64]| -> f64 {
        let mut kx = vec![0.0; n];
        for (s, row) in rows.iter().enumerate() {
            for &(s2, p) in row {
                if transpose {
                    kx[s2] += p * x[s];
                } else {
                    kx[s] += p * x[s2];
                }
            }
        }
        (0..n).map(|i| (x[i] - gamma * kx[i] - b[i]).abs()).fold(0.0, f64::max)
    };

    if n <= DENSE_STATE_LIMIT {
        let mut m = DMatrix::<f64>::identity(n, n);
        for (s, row) in rows.iter().enumerate() {
            for &(s2, p) in row {
                if transpose {
                    m[(s2, s)] -= gamma * p;
                } else {
                    m[(s, s2)] -= gamma * p;
                }
            }
        }
        let x = m
            .lu()
            .solve(&DVector::from_column_slice(b))
            .ok_or(Error::NonConvergence {
                what: "dense policy evaluation",
                residual: f64::INFINITY,
                iterations: 0,
            })?;
        let x: Vec<f64> = x.iter().copied().collect();
        let res = residual(&x);
        if res > EVAL_RESIDUAL {
            return Err(Error::NonConvergence {
                what: "dense policy evaluation",
                residual: res,
                iterations: 1,
            });
        }
        return Ok(x);
    }

    // Jacobi-style sweeps on the (possibly transposed) kernel; contraction factor gamma.
    let mut x = b.to_vec();
    let max_sweeps = 1_000_000;
    for sweep in 0..max_sweeps {
        let mut next = b.to_vec();
        for (s, row) in rows.iter().enumerate() {
            for &(s2, p) in row {
                if transpose {
                    next[s2] += gamma * p * x[s];
                } else {
                    next[s] += gamma * p * x[s2];
                }
            }
        }
        let delta = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        if delta * gamma / (1.0 - gamma).max(1e-300) < EVAL_RESIDUAL * 0.1 || delta == 0.0 {
            let res = residual(&x);
            if res <= EVAL_RESIDUAL {
                return Ok(x);
            }
        }
        if sweep + 1 == max_sweeps {
            return Err(Error::NonConvergence {
                what: "iterative policy evaluation",
                residual: residual(&x),
                iterations: max_sweeps,
            });
        }
    }
    unreachable!()
}

/// Exact `V`, `Q`, `rho` and `J` of `policy`.
pub fn evaluate(game: &CooperativeMarkovGame, policy: &TabularJointPolicy) -> Result<ValueProfile> {
    policy.validate(game)?;
    let gamma = game.gamma();
    let (rows, r_pi) = policy_kernel(game, policy);
    let v = solve_discounted(&rows, gamma, &r_pi, false)?;
    let rho = solve_discounted(&rows, gamma, game.initial_dist(), true)?;
    let q = (0..game.n_states())
        .map(|s| {
            (0..game.n_joint())
                .map(|j| {
                    let next: f64 = game
                        .transition_row(s, j)
                        .iter()
                        .zip(&v)
                        .map(|(p, v)| p * v)
                        .sum();
                    game.reward(s, j) + gamma * next
                })
                .collect()
        })
        .collect();
    let j = game.initial_dist().iter().zip(&v).map(|(d, v)| d * v).sum();
    Ok(ValueProfile { v, q, rho, j })
}

fn check_distinct(agents: &[usize], n_agents: usize) -> Result<()> {
    let mut seen = vec![false; n_agents];
    for &a in agents {
        if a >= n_agents {
            return Err(Error::InvalidArgument(format!("agent {a} out of range")));
        }
        if seen[a] {
            return Err(Error::InvalidArgument(format!("agent {a} listed twice")));
        }
        seen[a] = true;
    }
    Ok(())
}

/// Multi-agent state-action value `Q^{i_{1:m}}(s, a^{i_{1:m}})`: the complement's actions
/// are averaged out under `policy`. `m = n` gives `Q(s, a)` and `m = 0` gives `V(s)`.
pub fn multiagent_q(
    game: &CooperativeMarkovGame,
    policy: &TabularJointPolicy,
    profile: &ValueProfile,
    state: usize,
    order: &[usize],
    actions: &[usize],
) -> Result<f64> {
    if order.len() != actions.len() {
        return Err(Error::InvalidArgument("order and actions differ in length".into()));
    }
    check_distinct(order, game.n_agents())?;
    for (&agent, &a) in order.iter().zip(actions) {
        if a >= game.n_actions()[agent] {
            return Err(Error::InvalidArgument(format!("action {a} out of range for agent {agent}")));
        }
    }
    let mut fixed = vec![None; game.n_agents()];
    for (&agent, &a) in order.iter().zip(actions) {
        fixed[agent] = Some(a);
    }
    let mut total = 0.0;
    let mut acts = vec![0; game.n_agents()];
    'joint: for j in 0..game.n_joint() {
        game.joint().decode_into(j, &mut acts);
        let mut w = 1.0;
        for (agent, &a) in acts.iter().enumerate() {
            match fixed[agent] {
                Some(f) if f != a => continue 'joint,
                Some(_) => {}
                None => w *= policy.row(agent, state)[a],
            }
        }
        total += w * profile.q[state][j];
    }
    Ok(total)
}

/// Multi-agent advantage `A^{i_{1:m}}(s, a^{j_{1:k}}, a^{i_{1:m}}) = Q^{j,i} - Q^{j}`.
pub fn multiagent_adv(
    game: &CooperativeMarkovGame,
    policy: &TabularJointPolicy,
    profile: &ValueProfile,
    state: usize,
    given: &[(usize, usize)],
    of: &[(usize, usize)],
) -> Result<f64> {
    let given_agents: Vec<usize> = given.iter().map(|p| p.0).collect();
    let of_agents: Vec<usize> = of.iter().map(|p| p.0).collect();
    if given_agents.iter().any(|g| of_agents.contains(g)) {
        return Err(Error::InvalidArgument("given and of agent sets overlap".into()));
    }
    let union: Vec<(usize, usize)> = given.iter().chain(of).copied().collect();
    let (ua, uact): (Vec<usize>, Vec<usize>) = union.into_iter().unzip();
    let (ga, gact): (Vec<usize>, Vec<usize>) = given.iter().copied().unzip();
    Ok(multiagent_q(game, policy, profile, state, &ua, &uact)? - multiagent_q(game, policy, profile, state, &ga, &gact)?)
}

/// Per-state tables for agent `i_m` updating after an ordered prefix of already-updated agents.
///
/// For prefix joint action `k` (mixed radix over the prefix's action counts, first prefix agent
/// most significant) and agent action `a`:
/// `joint_adv[k][a] = A^{prefix, i}(s, a^prefix_k, a)` and `prefix_adv[k] = A^{prefix}(s, a^prefix_k)`,
/// both under the current policy; `prefix_weights[k]` is the updated prefix's probability of `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalAdvantage {
    pub state: usize,
    pub agent: usize,
    pub prefix: Vec<usize>,
    pub n_actions: usize,
    pub current: Vec<f64>,
    pub prefix_weights: Vec<f64>,
    pub joint_adv: Vec<Vec<f64>>,
    pub prefix_adv: Vec<f64>,
}

impl LocalAdvantage {
    /// `prefix_rows[m]` is the updated policy row of `prefix[m]` at `state`.
    pub fn build(
        game: &CooperativeMarkovGame,
        policy: &TabularJointPolicy,
        profile: &ValueProfile,
        state: usize,
        prefix: &[usize],
        prefix_rows: &[&[f64]],
        agent: usize,
    ) -> Result<Self> {
        if prefix.len() != prefix_rows.len() {
            return Err(Error::InvalidArgument("prefix agents and rows differ in length".into()));
        }
        let mut all = prefix.to_vec();
        all.push(agent);
        check_distinct(&all, game.n_agents())?;
        let sizes = game.n_actions();
        for (&p, row) in prefix.iter().zip(prefix_rows) {
            validate_row(row, sizes[p]).map_err(|m| Error::InvalidPolicy(format!("prefix agent {p}: {m}")))?;
        }
        let n_prefix: usize = prefix.iter().map(|&p| sizes[p]).product();
        let na = sizes[agent];
        let mut in_set = vec![false; game.n_agents()];
        for &a in &all {
            in_set[a] = true;
        }

        let mut table = vec![vec![0.0; na]; n_prefix];
        let mut acts = vec![0; game.n_agents()];
        for j in 0..game.n_joint() {
            game.joint().decode_into(j, &mut acts);
            let mut w = 1.0;
            for (k, &a) in acts.iter().enumerate() {
                if !in_set[k] {
                    w *= policy.row(k, state)[a];
                }
            }
            if w == 0.0 {
                continue;
            }
            let k = prefix.iter().fold(0, |acc, &p| acc * sizes[p] + acts[p]);
            table[k][acts[agent]] += w * profile.q[state][j];
        }
        let v = profile.v[state];
        let current = policy.row(agent, state).to_vec();
        let mut prefix_adv = Vec::with_capacity(n_prefix);
        for row in table.iter_mut() {
            let marg: f64 = row.iter().zip(&current).map(|(q, p)| q * p).sum();
            prefix_adv.push(marg - v);
            for q in row.iter_mut() {
                *q -= v;
            }
        }
        let mut prefix_weights = vec![1.0; n_prefix];
        for (k, w) in prefix_weights.iter_mut().enumerate() {
            let mut rest = k;
            for (m, &p) in prefix.iter().enumerate().rev() {
                *w *= prefix_rows[m][rest % sizes[p]];
                rest /= sizes[p];
            }
        }
        Ok(Self {
            state,
            agent,
            prefix: prefix.to_vec(),
            n_actions: na,
            current,
            prefix_weights,
            joint_adv: table,
            prefix_adv,
        })
    }

    /// `g[a] = E_{a^prefix ~ updated prefix}[A^{i}(s, a^prefix, a)]`.
    pub fn expected_advantage(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.n_actions];
        for ((w, row), base) in self.prefix_weights.iter().zip(&self.joint_adv).zip(&self.prefix_adv) {
            if *w == 0.0 {
                continue;
            }
            for (ga, q) in g.iter_mut().zip(row) {
                *ga += w * (q - base);
            }
        }
        g
    }
}

/// Rows of the updated prefix at one state, borrowed from full per-agent tables.
fn prefix_rows_at(prefix: &[(usize, Vec<Vec<f64>>)], state: usize) -> (Vec<usize>, Vec<&[f64]>) {
    prefix.iter().map(|(agent, rows)| (*agent, rows[state].as_slice())).unzip()
}

/// `L^{i_{1:m}}(pi_bar^{prefix}, pi_hat^{i_m})`: the rho-weighted (unnormalised) expected
/// multi-agent advantage of `agent` playing `pi_hat` after the prefix switched to its new rows.
pub fn surrogate_l(
    game: &CooperativeMarkovGame,
    policy: &TabularJointPolicy,
    profile: &ValueProfile,
    prefix: &[(usize, Vec<Vec<f64>>)],
    agent: usize,
    pi_hat: &[Vec<f64>],
) -> Result<f64> {
    if pi_hat.len() != game.n_states() {
        return Err(Error::InvalidPolicy("candidate policy has the wrong number of states".into()));
    }
    let mut total = 0.0;
    for s in 0..game.n_states() {
        let (agents, rows) = prefix_rows_at(prefix, s);
        let local = LocalAdvantage::build(game, policy, profile, s, &agents, &rows, agent)?;
        validate_row(&pi_hat[s], game.n_actions()[agent]).map_err(Error::InvalidPolicy)?;
        let g = local.expected_advantage();
        total += profile.rho[s] * g.iter().zip(&pi_hat[s]).map(|(g, p)| g * p).sum::<f64>();
    }
    Ok(total)
}

/// Result of exact best-response computation for every agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestResponseReport {
    /// `J` of the evaluated joint policy.
    pub j: f64,
    /// `max_{pi^i} J(pi^i, pi^{-i}) - J(pi)` per agent.
    pub gaps: Vec<f64>,
    /// Greedy deterministic best response per agent, indexed `[agent][state]`.
    pub best_responses: Vec<Vec<usize>>,
}

impl BestResponseReport {
    pub fn max_gap(&self) -> f64 {
        self.gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Value iteration on a finite MDP given by per-(state, action) rewards and sparse rows.
/// Returns the greedy deterministic policy (lowest index among ties).
fn value_iteration(rewards: &[Vec<f64>], rows: &[Vec<Vec<(usize, f64)>>], gamma: f64) -> Result<Vec<usize>> {
    let ns = rewards.len();
    let mut v = vec![0.0; ns];
    let backup = |v: &[f64], s: usize, a: usize| -> f64 {
        rewards[s][a] + gamma * rows[s][a].iter().map(|&(s2, p)| p * v[s2]).sum::<f64>()
    };
    let mut converged = false;
    let mut delta = f64::INFINITY;
    for _ in 0..VALUE_ITERATION_CAP {
        delta = 0.0;
        let next: Vec<f64> = (0..ns)
            .map(|s| (0..rewards[s].len()).map(|a| backup(&v, s, a)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for (a, b) in next.iter().zip(&v) {
            delta = f64::max(delta, (a - b).abs());
        }
        v = next;
        if delta < VALUE_ITERATION_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "best-response value iteration",
            residual: delta,
            iterations: VALUE_ITERATION_CAP,
        });
    }
    Ok((0..ns)
        .map(|s| {
            let vals: Vec<f64> = (0..rewards[s].len()).map(|a| backup(&v, s, a)).collect();
            let best = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let scale = best.abs().max(1.0);
            vals.iter()
                .position(|&x| x >= best - 1e-11 * scale)
                .expect("non-empty action set")
        })
        .collect())
}

/// Greedy best response of `agent` with everyone else frozen at `policy`.
pub fn best_response(game: &CooperativeMarkovGame, policy: &TabularJointPolicy, agent: usize) -> Result<Vec<usize>> {
    let ns = game.n_states();
    let na = game.n_actions()[agent];
    let mut rewards = vec![vec![0.0; na]; ns];
    let mut rows = vec![vec![Vec::new(); na]; ns];
    let mut scratch = vec![vec![0.0; ns]; na];
    let mut acts = vec![0; game.n_agents()];
    for s in 0..ns {
        for j in 0..game.n_joint() {
            game.joint().decode_into(j, &mut acts);
            let w: f64 = acts
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != agent)
                .map(|(k, &a)| policy.row(k, s)[a])
                .product();
            if w == 0.0 {
                continue;
            }
            let a = acts[agent];
            rewards[s][a] += w * game.reward(s, j);
            for (s2, &p) in game.transition_row(s, j).iter().enumerate() {
                scratch[a][s2] += w * p;
            }
        }
        for a in 0..na {
            rows[s][a] = scratch[a]
                .iter()
                .enumerate()
                .filter(|(_, &p)| p != 0.0)
                .map(|(s2, &p)| (s2, p))
                .collect();
            scratch[a].iter_mut().for_each(|p| *p = 0.0);
        }
    }
    value_iteration(&rewards, &rows, game.gamma())
}

/// Per-agent best-response gaps; all zero exactly at a Nash equilibrium.
pub fn best_response_gap(game: &CooperativeMarkovGame, policy: &TabularJointPolicy) -> Result<BestResponseReport> {
    let base = evaluate(game, policy)?;
    let mut gaps = Vec::with_capacity(game.n_agents());
    let mut best_responses = Vec::with_capacity(game.n_agents());
    for agent in 0..game.n_agents() {
        let br = best_response(game, policy, agent)?;
        let na = game.n_actions()[agent];
        let rows = br
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; na];
                row[a] = 1.0;
                row
            })
            .collect();
        let deviated = evaluate(game, &policy.with_agent(agent, rows))?;
        gaps.push(deviated.j - base.j);
        best_responses.push(br);
    }
    Ok(BestResponseReport {
        j: base.j,
        gaps,
        best_responses,
    })
}

/// Optimal return over all joint policies, by value iteration on the centralised MDP.
/// Returns `J*` and a greedy optimal joint action per state.
pub fn optimal_joint_value(game: &CooperativeMarkovGame) -> Result<(f64, Vec<usize>)> {
    let ns = game.n_states();
    let rewards: Vec<Vec<f64>> = (0..ns)
        .map(|s| (0..game.n_joint()).map(|j| game.reward(s, j)).collect())
        .collect();
    let rows: Vec<Vec<Vec<(usize, f64)>>> = (0..ns)
        .map(|s| {
            (0..game.n_joint())
                .map(|j| {
                    game.transition_row(s, j)
                        .iter()
                        .enumerate()
                        .filter(|(_, &p)| p != 0.0)
                        .map(|(s2, &p)| (s2, p))
                        .collect()
                })
                .collect()
        })
        .collect();
    let greedy = value_iteration(&rewards, &rows, game.gamma())?;
    let per_agent: Vec<Vec<usize>> = (0..game.n_agents())
        .map(|i| greedy.iter().map(|&j| game.joint().action_of(j, i)).collect())
        .collect();
    let profile = evaluate(game, &TabularJointPolicy::deterministic(game, &per_agent))?;
    Ok((profile.j, greedy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{make_matrix_game_example2, make_random_game, single_state_game};

    fn example2_at(p0: f64) -> (CooperativeMarkovGame, TabularJointPolicy) {
        let g = make_matrix_game_example2();
        let pi = TabularJointPolicy::stationary(&g, |_| vec![p0, 1.0 - p0]);
        (g, pi)
    }

    #[test]
    fn geometric_visitation_on_one_state() {
        let g = single_state_game(vec![2], |a| a[0] as f64).unwrap();
        let g = CooperativeMarkovGame::new(vec![2], 1, 0.9, g.reward_table().to_vec(), vec![1.0, 1.0], vec![1.0]).unwrap();
        let p = evaluate(&g, &TabularJointPolicy::uniform(&g)).unwrap();
        assert!((p.rho[0] - 10.0).abs() < 1e-12);
        assert!((p.v[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn example2_uniform_value() {
        let (g, pi) = example2_at(0.5);
        let p = evaluate(&g, &pi).unwrap();
        // (0 + 2 + 2 - 1) / 4
        assert!((p.v[0] - 0.75).abs() < 1e-15);
        assert!((p.j - 0.75).abs() < 1e-15);
        let q1 = multiagent_q(&g, &pi, &p, 0, &[0], &[0]).unwrap();
        assert!((q1 - 1.0).abs() < 1e-15);
        assert_eq!(multiagent_q(&g, &pi, &p, 0, &[0, 1], &[1, 1]).unwrap(), -1.0);
        assert!((multiagent_q(&g, &pi, &p, 0, &[], &[]).unwrap() - p.v[0]).abs() < 1e-15);
        let a1 = multiagent_adv(&g, &pi, &p, 0, &[], &[(0, 0)]).unwrap();
        assert!((a1 - 0.25).abs() < 1e-15);
        let a2 = multiagent_adv(&g, &pi, &p, 0, &[(0, 0)], &[(1, 1)]).unwrap();
        assert!((a2 - 1.0).abs() < 1e-15);
        let full = multiagent_adv(&g, &pi, &p, 0, &[], &[(0, 1), (1, 0)]).unwrap();
        assert!((full - p.advantage(0, 2)).abs() < 1e-15);
    }

    #[test]
    fn rejects_duplicate_and_overlapping_agents() {
        let (g, pi) = example2_at(0.5);
        let p = evaluate(&g, &pi).unwrap();
        assert!(multiagent_q(&g, &pi, &p, 0, &[0, 0], &[0, 1]).is_err());
        assert!(multiagent_adv(&g, &pi, &p, 0, &[(0, 0)], &[(0, 1)]).is_err());
    }

    #[test]
    fn surrogate_properties_on_example2() {
        let (g, pi) = example2_at(0.7);
        let p = evaluate(&g, &pi).unwrap();
        assert!((p.j - 0.75).abs() < 1e-14);
        let unchanged = surrogate_l(&g, &pi, &p, &[], 0, pi.agent(0)).unwrap();
        assert!(unchanged.abs() < 1e-15);
        let greedy = surrogate_l(&g, &pi, &p, &[], 0, &[vec![0.0, 1.0]]).unwrap();
        // Q^1(1) = 0.7 * 2 + 0.3 * (-1) = 1.1, V = 0.75, rho = 1 (gamma = 0)
        assert!((greedy - (1.1 - 0.75)).abs() < 1e-14);
        // with a prefix already at delta(1), agent 2 playing delta(0) gains A^2(1, 0) = 2 - 1.1
        let prefix = vec![(0, vec![vec![0.0, 1.0]])];
        let l2 = surrogate_l(&g, &pi, &p, &prefix, 1, &[vec![1.0, 0.0]]).unwrap();
        assert!((l2 - 0.9).abs() < 1e-14);
    }

    #[test]
    fn best_response_gaps_on_example2() {
        let g = make_matrix_game_example2();
        let ne = TabularJointPolicy::deterministic(&g, &[vec![1], vec![0]]);
        let rep = best_response_gap(&g, &ne).unwrap();
        assert_eq!(rep.j, 2.0);
        assert_eq!(rep.gaps, vec![0.0, 0.0]);
        let bad = TabularJointPolicy::deterministic(&g, &[vec![1], vec![1]]);
        let rep = best_response_gap(&g, &bad).unwrap();
        assert_eq!(rep.gaps, vec![3.0, 3.0]);
        assert_eq!(rep.best_responses, vec![vec![0], vec![0]]);
    }

    #[test]
    fn visitation_mass_and_return_identity() {
        for seed in 0..5 {
            let g = make_random_game(2, 4, &[2, 3], 0.9, seed).unwrap();
            let pi = TabularJointPolicy::uniform(&g);
            let p = evaluate(&g, &pi).unwrap();
            let mass: f64 = p.rho.iter().sum();
            assert!((mass * (1.0 - g.gamma()) - 1.0).abs() < 1e-9);
            let via_q: f64 = (0..g.n_states())
                .map(|s| {
                    g.initial_dist()[s]
                        * (0..g.n_joint()).map(|j| pi.joint_prob(&g, s, j) * p.q[s][j]).sum::<f64>()
                })
                .sum();
            assert!((via_q - p.j).abs() < 1e-10);
            // J also equals rho-weighted reward
            let via_rho: f64 = (0..g.n_states())
                .map(|s| p.rho[s] * (0..g.n_joint()).map(|j| pi.joint_prob(&g, s, j) * g.reward(s, j)).sum::<f64>())
                .sum();
            assert!((via_rho - p.j).abs() < 1e-10);
            let rep = best_response_gap(&g, &pi).unwrap();
            assert!(rep.gaps.iter().all(|&x| x >= -1e-10));
        }
    }

    #[test]
    fn evaluation_is_pure() {
        let g = make_random_game(3, 3, &[2, 2, 3], 0.8, 9).unwrap();
        let pi = TabularJointPolicy::uniform(&g);
        assert_eq!(evaluate(&g, &pi).unwrap(), evaluate(&g, &pi).unwrap());
    }

    #[test]
    fn optimal_value_dominates_every_deterministic_policy() {
        let g = make_random_game(2, 2, &[2, 2], 0.7, 3).unwrap();
        let (best, _) = optimal_joint_value(&g).unwrap();
        for code in 0..(4usize.pow(2)) {
            let acts: Vec<Vec<usize>> = (0..2)
                .map(|i| (0..2).map(|s| (code >> (2 * s + i)) & 1).collect())
                .collect();
            let j = evaluate(&g, &TabularJointPolicy::deterministic(&g, &acts)).unwrap().j;
            assert!(j <= best + 1e-10);
        }
    }

    #[test]
    fn constant_reward_game_has_zero_gaps() {
        let g = single_state_game(vec![3, 2], |_| 1.5).unwrap();
        let rep = best_response_gap(&g, &TabularJointPolicy::uniform(&g)).unwrap();
        assert!(rep.gaps.iter().all(|&x| x.abs() < 1e-12));
    }
}
