//! Counterexample reproductions and the exact-oracle commands.

use anyhow::bail;
use harl_core::game::{make_diff_game, make_matrix_game_example2, make_xor_team_game};
use harl_core::hatrl::{agent_tr_step, haml_iteration, policy_iteration, simultaneous_greedy_step, IterationRun};
use harl_core::oracle::{best_response_gap, optimal_joint_value, BestResponseReport};
use harl_core::{evaluate, CooperativeMarkovGame, PermutationSampler, TabularJointPolicy, TrustRegionConfig};
use harl_engines::diffgame::{exact_report, DiffGameReport};
use serde::Serialize;

use crate::config::ExactOptions;

#[derive(Clone, Debug, Serialize)]
pub struct Example2Report {
    pub initial_prob_action0: f64,
    pub j_old: f64,
    pub simultaneous_j: f64,
    pub simultaneous_policy: TabularJointPolicy,
    pub sequential_j: f64,
    pub sequential_policy: TabularJointPolicy,
    pub min_j: f64,
}

/// Both agents start at `pi(0) = p0`; one round of independent greedy responses versus one
/// sequential round (agent 0 then agent 1).
pub fn example2(p0: f64) -> anyhow::Result<Example2Report> {
    let g = make_matrix_game_example2();
    let pi = TabularJointPolicy::stationary(&g, |_| vec![p0, 1.0 - p0]);
    let profile = evaluate(&g, &pi)?;
    let sim = simultaneous_greedy_step(&g, &pi)?;
    let cfg = TrustRegionConfig::default();
    let first = agent_tr_step(&g, &pi, &profile, &[], 0, &cfg)?;
    let second = agent_tr_step(&g, &pi, &profile, &[(0, first.rows.clone())], 1, &cfg)?;
    let seq = TabularJointPolicy::new(vec![first.rows, second.rows]);
    let min_j = (0..g.n_joint()).map(|j| g.reward(0, j)).fold(f64::INFINITY, f64::min);
    Ok(Example2Report {
        initial_prob_action0: p0,
        j_old: profile.j,
        simultaneous_j: evaluate(&g, &sim)?.j,
        simultaneous_policy: sim,
        sequential_j: evaluate(&g, &seq)?.j,
        sequential_policy: seq,
        min_j,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct XorReport {
    pub n: usize,
    pub heterogeneous_optimum: f64,
    pub shared_optimum: f64,
    /// Probability of action 0 at the shared optimum.
    pub shared_argmax: f64,
    pub ratio: f64,
    pub analytic_ratio: f64,
}

/// Best return of a policy shared by every agent on a one-state, two-action game, by a grid scan
/// followed by golden-section refinement.
pub fn shared_optimum(game: &CooperativeMarkovGame) -> anyhow::Result<(f64, f64)> {
    if game.n_states() != 1 || game.n_actions().iter().any(|&k| k != 2) {
        bail!("shared optimum scan needs one state and two actions per agent");
    }
    let j = |p: f64| -> anyhow::Result<f64> { Ok(evaluate(game, &TabularJointPolicy::stationary(game, |_| vec![p, 1.0 - p]))?.j) };
    let grid = 200;
    let mut best = (0.0, j(0.0)?);
    for k in 1..=grid {
        let p = k as f64 / grid as f64;
        let v = j(p)?;
        if v > best.1 {
            best = (p, v);
        }
    }
    let step = 1.0 / grid as f64;
    let (mut lo, mut hi) = ((best.0 - step).max(0.0), (best.0 + step).min(1.0));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if j(a)? >= j(b)? {
            hi = b;
        } else {
            lo = a;
        }
    }
    let p = 0.5 * (lo + hi);
    let v = j(p)?;
    Ok(if v >= best.1 { (p, v) } else { best })
}

pub fn xor(n: usize) -> anyhow::Result<XorReport> {
    let g = make_xor_team_game(n)?;
    let (het, _) = optimal_joint_value(&g)?;
    let (p, shared) = shared_optimum(&g)?;
    Ok(XorReport {
        n,
        heterogeneous_optimum: het,
        shared_optimum: shared,
        shared_argmax: p,
        ratio: shared / het,
        analytic_ratio: 2.0 / 2f64.powi(n as i32),
    })
}

pub const DIFFGAME_START: [f64; 2] = [1.0, -1.0];
pub const DIFFGAME_LR: f64 = 3.0;

pub fn diffgame() -> DiffGameReport {
    exact_report(&make_diff_game(), DIFFGAME_START, DIFFGAME_LR)
}

/// Exact sequential iteration from the configured start, one run per seed.
pub fn exact_iter(
    game: &CooperativeMarkovGame,
    opts: &ExactOptions,
    tr: &TrustRegionConfig,
    seed: u64,
) -> anyhow::Result<IterationRun> {
    let pi0 = match &opts.initial_row {
        Some(row) => TabularJointPolicy::stationary(game, |_| row.clone()),
        None => TabularJointPolicy::uniform(game),
    };
    pi0.validate(game)?;
    let mut sampler = match &opts.order {
        Some(o) => PermutationSampler::fixed(o.clone()),
        None => PermutationSampler::uniform(seed),
    };
    Ok(match &opts.drift {
        Some(d) => {
            let specs = vec![d.spec(); game.n_agents()];
            haml_iteration(game, &pi0, &specs, &mut sampler, tr)?
        }
        None => policy_iteration(game, &pi0, &mut sampler, tr)?,
    })
}

/// Best-response gaps of `pi`; passes when every gap is below `tolerance`.
pub fn verify_ne(game: &CooperativeMarkovGame, pi: &TabularJointPolicy, tolerance: f64) -> anyhow::Result<(BestResponseReport, bool)> {
    pi.validate(game)?;
    let report = best_response_gap(game, pi)?;
    let pass = report.gaps.iter().all(|&g| g < tolerance);
    Ok((report, pass))
}
