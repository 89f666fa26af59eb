//! Exact sequential trust-region iteration and the mirror-learning template on tabular games.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::CooperativeMarkovGame;
use crate::haml::{clip_segments, ensure_drift_sane, mean_kl, DriftSpec, DriftStructure, Neighbourhood};
use crate::oracle::{best_response_gap, evaluate, LocalAdvantage, TabularJointPolicy, ValueProfile};
use crate::simplex::{exponentiated_gradient, fill_segments, kl, kl_prox_row};

/// Tolerance on `J_{k+1} >= J_k`.
pub const MONOTONIC_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMode {
    /// `C * max_s KL`; only solvable exactly on single-state games, where it equals the sum.
    MaxKlExact,
    /// `C * sum_s KL`, an upper bound of the max-KL penalty that splits across states.
    #[default]
    SumKlSurrogate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InnerSolver {
    /// Closed form up to a scalar multiplier found by bisection.
    #[default]
    ExactDual,
    /// Entropic mirror ascent with a sup-norm-normalised step.
    ExponentiatedGradient { step: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustRegionConfig {
    pub penalty_mode: PenaltyMode,
    pub solver: InnerSolver,
    pub inner_iters: usize,
    pub inner_tol: f64,
    pub max_outer_iters: usize,
    /// Multiplies the theoretical penalty coefficient; 1 keeps the guarantee.
    pub penalty_scale: f64,
    /// Compute best-response gaps every round (otherwise only at the end).
    pub log_gaps: bool,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            penalty_mode: PenaltyMode::SumKlSurrogate,
            solver: InnerSolver::ExactDual,
            inner_iters: 500,
            inner_tol: 1e-10,
            max_outer_iters: 50,
            penalty_scale: 1.0,
            log_gaps: true,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_tol > 0.0) {
            return Err(Error::InvalidArgument("inner_tol must be positive".into()));
        }
        if !(self.penalty_scale >= 0.0) || !self.penalty_scale.is_finite() {
            return Err(Error::InvalidArgument("penalty_scale must be finite and non-negative".into()));
        }
        if let InnerSolver::ExponentiatedGradient { step } = self.solver {
            if !(step > 0.0) {
                return Err(Error::InvalidArgument("mirror ascent step must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `C = 4 gamma eps / (1 - gamma)^2` with `eps = max_{s,a} |A(s, a)|`.
pub fn penalty_coefficient(gamma: f64, profile: &ValueProfile) -> f64 {
    let eps = profile.max_abs_advantage();
    4.0 * gamma * eps / ((1.0 - gamma) * (1.0 - gamma))
}

/// One agent's update inside a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub agent: usize,
    pub rows: Vec<Vec<f64>>,
    /// `L(prefix_new, new rows)`.
    pub surrogate: f64,
    /// Penalty (or drift) charged for the move.
    pub penalty: f64,
    /// `surrogate - penalty`; never negative since the old rows score zero.
    pub objective: f64,
}

fn local_tables(
    game: &CooperativeMarkovGame,
    pi: &TabularJointPolicy,
    profile: &ValueProfile,
    prefix_new: &[(usize, Vec<Vec<f64>>)],
    agent: usize,
) -> Result<Vec<LocalAdvantage>> {
    let prefix: Vec<usize> = prefix_new.iter().map(|(a, _)| *a).collect();
    (0..game.n_states())
        .map(|s| {
            let rows: Vec<&[f64]> = prefix_new.iter().map(|(_, r)| r[s].as_slice()).collect();
            LocalAdvantage::build(game, pi, profile, s, &prefix, &rows, agent)
        })
        .collect()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Maximises `<x, h> - c KL(p || x)` with the configured inner solver.
fn penalised_row(p: &[f64], h: &[f64], c: f64, config: &TrustRegionConfig) -> Result<Vec<f64>> {
    match config.solver {
        InnerSolver::ExactDual => kl_prox_row(p, h, c, config.inner_tol),
        InnerSolver::ExponentiatedGradient { step } => {
            let run = exponentiated_gradient(
                p,
                |x| dot(x, h) - c * kl(p, x),
                |x| {
                    h.iter()
                        .zip(p)
                        .zip(x)
                        .map(|((&ha, &pa), &xa)| if pa > 0.0 { ha + c * pa / xa } else { ha })
                        .collect()
                },
                step,
                config.inner_iters,
                config.inner_tol,
            );
            if run.stationarity > config.inner_tol {
                return Err(Error::NonConvergence {
                    what: "exponentiated-gradient inner solver",
                    residual: run.stationarity,
                    iterations: run.iterations,
                });
            }
            Ok(run.row)
        }
    }
}

/// Penalised surrogate step of `agent` after the agents in `prefix_new` moved to their new rows,
/// using the theoretical coefficient `C` from `profile`.
pub fn agent_tr_step(
    game: &CooperativeMarkovGame,
    pi: &TabularJointPolicy,
    profile: &ValueProfile,
    prefix_new: &[(usize, Vec<Vec<f64>>)],
    agent: usize,
    config: &TrustRegionConfig,
) -> Result<AgentStep> {
    let c = config.penalty_scale * penalty_coefficient(game.gamma(), profile);
    agent_tr_step_with_penalty(game, pi, profile, prefix_new, agent, c, config)
}

/// As [`agent_tr_step`] with an explicit penalty coefficient.
pub fn agent_tr_step_with_penalty(
    game: &CooperativeMarkovGame,
    pi: &TabularJointPolicy,
    profile: &ValueProfile,
    prefix_new: &[(usize, Vec<Vec<f64>>)],
    agent: usize,
    c: f64,
    config: &TrustRegionConfig,
) -> Result<AgentStep> {
    config.validate()?;
    if config.penalty_mode == PenaltyMode::MaxKlExact && game.n_states() != 1 {
        return Err(Error::InvalidArgument(
            "max-KL penalty is only solved exactly on single-state games".into(),
        ));
    }
    let locals = local_tables(game, pi, profile, prefix_new, agent)?;
    let mut rows = Vec::with_capacity(game.n_states());
    let (mut surrogate, mut penalty) = (0.0, 0.0);
    for (s, local) in locals.iter().enumerate() {
        let g = local.expected_advantage();
        let h: Vec<f64> = g.iter().map(|x| profile.rho[s] * x).collect();
        let p = &local.current;
        let mut row = penalised_row(p, &h, c, config)?;
        let mut gain = dot(&row, &h);
        let mut cost = if c == 0.0 { 0.0 } else { c * kl(p, &row) };
        if !(gain - cost >= 0.0) {
            row = p.clone();
            gain = dot(p, &h);
            cost = 0.0;
        }
        surrogate += gain;
        penalty += cost;
        rows.push(row);
    }
    Ok(AgentStep {
        agent,
        rows,
        surrogate,
        penalty,
        objective: surrogate - penalty,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "order", rename_all = "snake_case")]
pub enum PermutationMode {
    UniformRandom,
    Fixed(Vec<usize>),
}

/// Source of agent orders: uniform over all permutations, or one fixed order.
#[derive(Clone, Debug)]
pub struct PermutationSampler {
    rng: ChaCha8Rng,
    mode: PermutationMode,
}

impl PermutationSampler {
    pub fn uniform(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            mode: PermutationMode::UniformRandom,
        }
    }

    pub fn fixed(order: Vec<usize>) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(0),
            mode: PermutationMode::Fixed(order),
        }
    }

    pub fn mode(&self) -> &PermutationMode {
        &self.mode
    }

    pub fn draw(&mut self, n: usize) -> Result<Vec<usize>> {
        match &self.mode {
            PermutationMode::UniformRandom => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut self.rng);
                Ok(order)
            }
            PermutationMode::Fixed(order) => {
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != (0..n).collect::<Vec<_>>() {
                    return Err(Error::InvalidArgument(format!("{order:?} is not a permutation of {n} agents")));
                }
                Ok(order.clone())
            }
        }
    }
}

/// Log line of one outer round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub permutation: Vec<usize>,
    /// Indexed by agent.
    pub surrogates: Vec<f64>,
    /// Indexed by agent: surrogate minus penalty or drift.
    pub objectives: Vec<f64>,
    /// Return after the round.
    #[serde(rename = "J")]
    pub j: f64,
    /// Best-response gaps after the round (empty when not logged).
    pub gaps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRun {
    pub initial_j: f64,
    pub rounds: Vec<RoundLog>,
    pub final_policy: TabularJointPolicy,
    pub final_gaps: Vec<f64>,
}

impl IterationRun {
    /// `[J_0, J_1, ...]`.
    pub fn j_trajectory(&self) -> Vec<f64> {
        std::iter::once(self.initial_j).chain(self.rounds.iter().map(|r| r.j)).collect()
    }

    pub fn final_j(&self) -> f64 {
        self.rounds.last().map_or(self.initial_j, |r| r.j)
    }

    pub fn max_final_gap(&self) -> f64 {
        self.final_gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn run_rounds(
    game: &CooperativeMarkovGame,
    pi0: &TabularJointPolicy,
    sampler: &mut PermutationSampler,
    config: &TrustRegionConfig,
    mut agent_update: impl FnMut(&TabularJointPolicy, &ValueProfile, &[(usize, Vec<Vec<f64>>)], usize) -> Result<AgentStep>,
) -> Result<IterationRun> {
    config.validate()?;
    pi0.validate(game)?;
    let n = game.n_agents();
    let mut pi = pi0.clone();
    let mut profile = evaluate(game, &pi)?;
    let initial_j = profile.j;
    let mut rounds = Vec::with_capacity(config.max_outer_iters);
    for round in 0..config.max_outer_iters {
        let permutation = sampler.draw(n)?;
        let mut prefix_new: Vec<(usize, Vec<Vec<f64>>)> = Vec::with_capacity(n);
        let mut surrogates = vec![0.0; n];
        let mut objectives = vec![0.0; n];
        for &agent in &permutation {
            let step = agent_update(&pi, &profile, &prefix_new, agent)?;
            surrogates[agent] = step.surrogate;
            objectives[agent] = step.objective;
            prefix_new.push((agent, step.rows));
        }
        let mut next = pi.clone();
        for (agent, rows) in prefix_new {
            next.set_agent(agent, rows);
        }
        let next_profile = evaluate(game, &next)?;
        if next_profile.j < profile.j - MONOTONIC_TOLERANCE {
            return Err(Error::MonotonicityViolation {
                round,
                before: profile.j,
                after: next_profile.j,
            });
        }
        let gaps = if config.log_gaps {
            best_response_gap(game, &next)?.gaps
        } else {
            Vec::new()
        };
        rounds.push(RoundLog {
            round,
            permutation,
            surrogates,
            objectives,
            j: next_profile.j,
            gaps,
        });
        pi = next;
        profile = next_profile;
    }
    let final_gaps = match rounds.last() {
        Some(r) if !r.gaps.is_empty() => r.gaps.clone(),
        _ => best_response_gap(game, &pi)?.gaps,
    };
    Ok(IterationRun {
        initial_j,
        rounds,
        final_policy: pi,
        final_gaps,
    })
}

/// Sequential trust-region policy iteration: each round draws an order and every agent takes
/// [`agent_tr_step`] against the already-updated prefix.
pub fn policy_iteration(
    game: &CooperativeMarkovGame,
    pi0: &TabularJointPolicy,
    sampler: &mut PermutationSampler,
    config: &TrustRegionConfig,
) -> Result<IterationRun> {
    run_rounds(game, pi0, sampler, config, |pi, profile, prefix, agent| {
        agent_tr_step(game, pi, profile, prefix, agent, config)
    })
}

/// Every agent independently switches to its greedy response to the *old* joint policy.
/// Ties go to the lowest action index.
pub fn simultaneous_greedy_step(game: &CooperativeMarkovGame, pi: &TabularJointPolicy) -> Result<TabularJointPolicy> {
    let profile = evaluate(game, pi)?;
    let mut next = pi.clone();
    for agent in 0..game.n_agents() {
        let na = game.n_actions()[agent];
        let rows = (0..game.n_states())
            .map(|s| {
                let local = LocalAdvantage::build(game, pi, &profile, s, &[], &[], agent)?;
                let g = local.expected_advantage();
                let best = g.iter().enumerate().fold(0, |b, (a, &x)| if x > g[b] { a } else { b });
                let mut row = vec![0.0; na];
                row[best] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        next.set_agent(agent, rows);
    }
    Ok(next)
}

/// Per-state maximiser of `<x, h> - D(x)` for a given state under a full neighbourhood.
fn mirror_row(
    spec: &DriftSpec,
    local: &LocalAdvantage,
    g: &[f64],
    extra_kl: f64,
    config: &TrustRegionConfig,
) -> Result<Vec<f64>> {
    let p = &local.current;
    match spec.drift.structure() {
        DriftStructure::Trivial => penalised_row(p, g, extra_kl, config),
        DriftStructure::Kl { coef } => penalised_row(p, g, coef + extra_kl, config),
        DriftStructure::ClipRelu { eps } if extra_kl == 0.0 => Ok(fill_segments(p.len(), &clip_segments(local, g, eps))),
        _ => {
            let drift = spec.drift.as_ref();
            let run = exponentiated_gradient(
                p,
                |x| dot(x, g) - drift.value(local, x) - extra_kl * kl(p, x),
                |x| {
                    let dg = drift.gradient(local, x);
                    g.iter()
                        .zip(&dg)
                        .zip(p.iter().zip(x))
                        .map(|((ga, da), (&pa, &xa))| ga - da + if pa > 0.0 { extra_kl * pa / xa } else { 0.0 })
                        .collect()
                },
                0.1,
                config.inner_iters,
                config.inner_tol,
            );
            Ok(run.row)
        }
    }
}

fn mirror_step(
    spec: &DriftSpec,
    locals: &[LocalAdvantage],
    beta: &[f64],
    config: &TrustRegionConfig,
) -> Result<AgentStep> {
    let agent = locals[0].agent;
    let grads: Vec<Vec<f64>> = locals.iter().map(|l| l.expected_advantage()).collect();
    let current: Vec<Vec<f64>> = locals.iter().map(|l| l.current.clone()).collect();

    let solve_all = |nu: f64| -> Result<Vec<Vec<f64>>> {
        locals
            .iter()
            .zip(&grads)
            .zip(beta)
            .map(|((local, g), &b)| mirror_row(spec, local, g, nu / b, config))
            .collect()
    };

    let rows = match spec.neighbourhood {
        Neighbourhood::Full => solve_all(0.0)?,
        Neighbourhood::KlBall { delta } => {
            if !(delta > 0.0) {
                return Err(Error::Projection(format!("ball radius {delta} must be positive")));
            }
            let total: f64 = beta.iter().sum();
            let norm: Vec<f64> = beta.iter().map(|b| b / total).collect();
            let structured = matches!(spec.drift.structure(), DriftStructure::Trivial | DriftStructure::Kl { .. });
            if structured {
                // multiplier nu on the constraint sum_s norm_s KL_s <= delta enters state s as nu * norm_s / beta_s
                let solve = |nu: f64| -> Result<Vec<Vec<f64>>> {
                    locals
                        .iter()
                        .zip(&grads)
                        .zip(beta.iter().zip(&norm))
                        .map(|((local, g), (&b, &w))| mirror_row(spec, local, g, nu * w / b, config))
                        .collect()
                };
                let inside = |rows: &[Vec<f64>]| mean_kl(&current, rows, &norm) <= delta;
                let free = solve(0.0)?;
                if inside(&free) {
                    free
                } else {
                    let mut hi = 1.0;
                    let mut hi_rows = solve(hi)?;
                    let mut guard = 0;
                    while !inside(&hi_rows) {
                        hi *= 4.0;
                        hi_rows = solve(hi)?;
                        guard += 1;
                        if guard > 600 {
                            return Err(Error::Projection("no multiplier reaches the KL ball".into()));
                        }
                    }
                    let mut lo = 0.0;
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if mid <= lo || mid >= hi {
                            break;
                        }
                        let rows = solve(mid)?;
                        if inside(&rows) {
                            hi = mid;
                            hi_rows = rows;
                        } else {
                            lo = mid;
                        }
                    }
                    hi_rows
                }
            } else {
                // pull the unconstrained solution back towards the old rows along a segment
                let free = solve_all(0.0)?;
                let mix = |t: f64| -> Vec<Vec<f64>> {
                    current
                        .iter()
                        .zip(&free)
                        .map(|(p, q)| p.iter().zip(q).map(|(a, b)| (1.0 - t) * a + t * b).collect())
                        .collect()
                };
                if mean_kl(&current, &free, &norm) <= delta {
                    free
                } else {
                    let (mut lo, mut hi) = (0.0, 1.0);
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if mean_kl(&current, &mix(mid), &norm) <= delta {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    mix(lo)
                }
            }
        }
    };

    let mut surrogate = 0.0;
    let mut penalty = 0.0;
    let mut out = Vec::with_capacity(rows.len());
    for ((local, g), (row, &b)) in locals.iter().zip(&grads).zip(rows.into_iter().zip(beta)) {
        let d = ensure_drift_sane(spec.drift.as_ref(), local, &row)?;
        let value = dot(&row, g) - d;
        // keep the old row wherever the solver failed to reach the no-change value
        if value >= 0.0 {
            surrogate += b * dot(&row, g);
            penalty += b * d;
            out.push(row);
        } else {
            surrogate += b * dot(&local.current, g);
            out.push(local.current.clone());
        }
    }
    if !spec.neighbourhood.contains(&current, &out, beta) {
        return Err(Error::Projection(format!("agent {agent} left its neighbourhood")));
    }
    Ok(AgentStep {
        agent,
        rows: out,
        surrogate,
        penalty,
        objective: surrogate - penalty,
    })
}

/// Mirror-learning iteration: each agent, in a drawn order, maximises the `beta`-averaged
/// mirror operator over its neighbourhood. `specs[i]` belongs to agent `i`.
pub fn haml_iteration(
    game: &CooperativeMarkovGame,
    pi0: &TabularJointPolicy,
    specs: &[DriftSpec],
    sampler: &mut PermutationSampler,
    config: &TrustRegionConfig,
) -> Result<IterationRun> {
    if specs.len() != game.n_agents() {
        return Err(Error::InvalidArgument(format!(
            "{} drift specs for {} agents",
            specs.len(),
            game.n_agents()
        )));
    }
    run_rounds(game, pi0, sampler, config, |pi, profile, prefix, agent| {
        let spec = &specs[agent];
        let beta = spec.sampling.weights(&profile.rho);
        let locals = local_tables(game, pi, profile, prefix, agent)?;
        mirror_step(spec, &locals, &beta, config)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{make_matrix_game_example2, make_random_game, make_xor_team_game};

    fn example2_start() -> (CooperativeMarkovGame, TabularJointPolicy) {
        let g = make_matrix_game_example2();
        let pi = TabularJointPolicy::stationary(&g, |_| vec![0.7, 0.3]);
        (g, pi)
    }

    #[test]
    fn penalty_coefficient_cases() {
        let g = make_random_game(1, 1, &[2], 0.9, 0).unwrap();
        let mut p = evaluate(&g, &TabularJointPolicy::uniform(&g)).unwrap();
        p.q = vec![vec![1.0, -1.0]];
        p.v = vec![0.0];
        assert!((penalty_coefficient(0.9, &p) - 360.0).abs() < 1e-9);
        assert_eq!(penalty_coefficient(0.0, &p), 0.0);
        p.q = vec![vec![0.0, 0.0]];
        assert_eq!(penalty_coefficient(0.9, &p), 0.0);
    }

    #[test]
    fn sequential_example2_trace() {
        let (g, pi) = example2_start();
        let prof = evaluate(&g, &pi).unwrap();
        let cfg = TrustRegionConfig::default();
        let s1 = agent_tr_step(&g, &pi, &prof, &[], 0, &cfg).unwrap();
        assert_eq!(s1.rows, vec![vec![0.0, 1.0]]);
        let s2 = agent_tr_step(&g, &pi, &prof, &[(0, s1.rows.clone())], 1, &cfg).unwrap();
        assert_eq!(s2.rows, vec![vec![1.0, 0.0]]);
        let next = TabularJointPolicy::new(vec![s1.rows, s2.rows]);
        assert_eq!(evaluate(&g, &next).unwrap().j, 2.0);
    }

    #[test]
    fn simultaneous_example2_reaches_minimum() {
        let (g, pi) = example2_start();
        let next = simultaneous_greedy_step(&g, &pi).unwrap();
        assert_eq!(evaluate(&g, &next).unwrap().j, -1.0);
    }

    #[test]
    fn huge_penalty_keeps_policy() {
        let g = make_random_game(2, 3, &[2, 2], 0.9, 1).unwrap();
        let pi = TabularJointPolicy::uniform(&g);
        let prof = evaluate(&g, &pi).unwrap();
        let step = agent_tr_step_with_penalty(&g, &pi, &prof, &[], 0, 1e12, &TrustRegionConfig::default()).unwrap();
        for (a, b) in step.rows.iter().flatten().zip(pi.agent(0).iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn max_kl_mode_needs_one_state() {
        let g = make_random_game(2, 3, &[2, 2], 0.9, 1).unwrap();
        let pi = TabularJointPolicy::uniform(&g);
        let prof = evaluate(&g, &pi).unwrap();
        let cfg = TrustRegionConfig {
            penalty_mode: PenaltyMode::MaxKlExact,
            ..Default::default()
        };
        assert!(agent_tr_step(&g, &pi, &prof, &[], 0, &cfg).is_err());
        let (g1, pi1) = example2_start();
        let prof1 = evaluate(&g1, &pi1).unwrap();
        assert!(agent_tr_step(&g1, &pi1, &prof1, &[], 0, &cfg).is_ok());
    }

    #[test]
    fn mirror_ascent_solver_agrees_with_dual() {
        let g = make_random_game(2, 3, &[3, 2], 0.5, 2).unwrap();
        let pi = TabularJointPolicy::uniform(&g);
        let prof = evaluate(&g, &pi).unwrap();
        let exact = agent_tr_step_with_penalty(&g, &pi, &prof, &[], 0, 0.3, &TrustRegionConfig::default()).unwrap();
        let cfg = TrustRegionConfig {
            solver: InnerSolver::ExponentiatedGradient { step: 0.1 },
            inner_iters: 50_000,
            ..Default::default()
        };
        let eg = agent_tr_step_with_penalty(&g, &pi, &prof, &[], 0, 0.3, &cfg).unwrap();
        for (a, b) in exact.rows.iter().flatten().zip(eg.rows.iter().flatten()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn iteration_is_monotone_on_random_games() {
        for seed in 0..3 {
            let g = make_random_game(2, 4, &[2, 3], 0.9, seed).unwrap();
            let cfg = TrustRegionConfig {
                log_gaps: false,
                ..Default::default()
            };
            let run = policy_iteration(&g, &TabularJointPolicy::uniform(&g), &mut PermutationSampler::uniform(seed), &cfg)
                .unwrap();
            let js = run.j_trajectory();
            assert!(js.windows(2).all(|w| w[1] >= w[0] - MONOTONIC_TOLERANCE));
            assert!(run.rounds.iter().flat_map(|r| &r.objectives).all(|&o| o >= 0.0));
        }
    }

    #[test]
    fn example2_and_xor_reach_equilibrium() {
        let (g, pi) = example2_start();
        let run = policy_iteration(&g, &pi, &mut PermutationSampler::uniform(3), &TrustRegionConfig::default()).unwrap();
        assert_eq!(run.final_j(), 2.0);
        assert!(run.max_final_gap() < 1e-6);
        let x = make_xor_team_game(2).unwrap();
        let run = policy_iteration(
            &x,
            &TabularJointPolicy::stationary(&x, |i| if i == 0 { vec![0.6, 0.4] } else { vec![0.45, 0.55] }),
            &mut PermutationSampler::uniform(0),
            &TrustRegionConfig::default(),
        )
        .unwrap();
        assert!(run.max_final_gap() < 1e-6);
    }

    #[test]
    fn haml_shipped_specs_on_example2() {
        let (g, pi) = example2_start();
        let cfg = TrustRegionConfig {
            max_outer_iters: 150,
            ..Default::default()
        };
        for spec in [DriftSpec::greedy(), DriftSpec::trust_region(0.1), DriftSpec::clipped(0.2)] {
            let specs = vec![spec.clone(), spec.clone()];
            let run = haml_iteration(&g, &pi, &specs, &mut PermutationSampler::uniform(5), &cfg).unwrap();
            let js = run.j_trajectory();
            assert!(js.windows(2).all(|w| w[1] >= w[0] - MONOTONIC_TOLERANCE), "{}", spec.describe());
            assert!(run.max_final_gap() < 1e-6, "{} {:?}", spec.describe(), run.final_gaps);
        }
    }

    #[test]
    fn greedy_spec_matches_zero_penalty_iteration() {
        let (g, pi) = example2_start();
        let cfg = TrustRegionConfig {
            max_outer_iters: 3,
            ..Default::default()
        };
        let a = haml_iteration(&g, &pi, &[DriftSpec::greedy(), DriftSpec::greedy()], &mut PermutationSampler::uniform(1), &cfg)
            .unwrap();
        let b = policy_iteration(&g, &pi, &mut PermutationSampler::uniform(1), &cfg).unwrap();
        assert_eq!(a.final_policy, b.final_policy);
    }

    #[test]
    fn uniform_sampler_covers_all_orders() {
        let mut s = PermutationSampler::uniform(11);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            seen.insert(s.draw(3).unwrap());
        }
        assert_eq!(seen.len(), 6);
        assert!(PermutationSampler::fixed(vec![0, 0, 1]).draw(3).is_err());
    }
}
