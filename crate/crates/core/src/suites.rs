//! Randomised property suites over exact quantities, each returning a machine-readable verdict.

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{make_matrix_game_example2, make_random_game, make_xor_team_game, CooperativeMarkovGame};
use crate::haml::{check_hadf, statewise_check, random_policy, random_row, ClipReluDrift, DriftSpec, KlDrift};
use crate::hatrl::{haml_iteration, policy_iteration, PermutationSampler, TrustRegionConfig, MONOTONIC_TOLERANCE};
use crate::oracle::{evaluate, multiagent_adv, TabularJointPolicy};

pub const IDENTITY_TOLERANCE: f64 = 1e-10;
pub const GAP_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteVerdict {
    pub suite: String,
    pub passed: bool,
    pub checks: usize,
    /// Worst observed violation measure (its meaning depends on the suite).
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

pub const SUITES: &[&str] = &[
    "decomposition",
    "zero-mean",
    "surrogate",
    "monotonicity",
    "equilibrium",
    "hadf",
    "statewise",
    "haml",
];

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteVerdict> {
    match name {
        "decomposition" => decomposition_suite(50, seed),
        "zero-mean" => zero_mean_suite(50, seed),
        "surrogate" => surrogate_suite(20, seed),
        "monotonicity" => monotonicity_suite(10, 10, 50, seed),
        "equilibrium" => equilibrium_suite(10, seed),
        "hadf" => hadf_suite(10_000, seed),
        "statewise" => statewise_suite(20, seed),
        "haml" => haml_suite(seed),
        other => Err(Error::InvalidArgument(format!(
            "unknown suite '{other}' (expected one of {})",
            SUITES.join(", ")
        ))),
    }
}

/// Random game with at most 3 agents, 5 states and 3 actions per agent, plus a random
/// full-support policy.
pub fn random_fixture(rng: &mut ChaCha8Rng) -> Result<(CooperativeMarkovGame, TabularJointPolicy)> {
    let n = rng.random_range(1..=3);
    let n_states = rng.random_range(1..=5);
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(1..=3)).collect();
    let gamma = rng.random_range(0.0..0.95);
    let game = make_random_game(n, n_states, &actions, gamma, rng.random())?;
    let policy = random_policy(&game, rng, 0.05);
    Ok((game, policy))
}

fn verdict(suite: &str, checks: usize, worst: f64, tolerance: f64, detail: String) -> SuiteVerdict {
    SuiteVerdict {
        suite: suite.into(),
        passed: worst <= tolerance,
        checks,
        worst,
        tolerance,
        detail,
    }
}

/// `A^{i_{1:m}}(s, a^{i_{1:m}}) = sum_j A^{i_j}(s, a^{i_{1:j-1}}, a^{i_j})` for every state, every
/// permutation, every prefix length and every joint action.
pub fn decomposition_suite(n_games: usize, seed: u64) -> Result<SuiteVerdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checks, mut worst) = (0, 0.0_f64);
    for _ in 0..n_games {
        let (g, pi) = random_fixture(&mut rng)?;
        let prof = evaluate(&g, &pi)?;
        let n = g.n_agents();
        for s in 0..g.n_states() {
            for perm in (0..n).permutations(n) {
                for j in 0..g.n_joint() {
                    let acts = g.joint().decode(j);
                    let mut telescoped = 0.0;
                    for m in 0..n {
                        let given: Vec<(usize, usize)> = perm[..m].iter().map(|&k| (k, acts[k])).collect();
                        telescoped += multiagent_adv(&g, &pi, &prof, s, &given, &[(perm[m], acts[perm[m]])])?;
                        let of: Vec<(usize, usize)> = perm[..=m].iter().map(|&k| (k, acts[k])).collect();
                        let joint = multiagent_adv(&g, &pi, &prof, s, &[], &of)?;
                        worst = worst.max((joint - telescoped).abs());
                        checks += 1;
                    }
                }
            }
        }
    }
    Ok(verdict(
        "decomposition",
        checks,
        worst,
        IDENTITY_TOLERANCE,
        format!("{n_games} random games, all permutations, prefixes and joint actions"),
    ))
}

/// `E_{a^i ~ pi^i}[A^i(s, a^{prefix}, a^i)] = 0` for every prefix and prefix action.
pub fn zero_mean_suite(n_games: usize, seed: u64) -> Result<SuiteVerdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checks, mut worst) = (0, 0.0_f64);
    for _ in 0..n_games {
        let (g, pi) = random_fixture(&mut rng)?;
        let prof = evaluate(&g, &pi)?;
        let n = g.n_agents();
        for s in 0..g.n_states() {
            for agent in 0..n {
                let others: Vec<usize> = (0..n).filter(|&k| k != agent).collect();
                for size in 0..=others.len() {
                    for prefix in others.iter().copied().combinations(size) {
                        let ranges = prefix.iter().map(|&k| 0..g.n_actions()[k]).multi_cartesian_product();
                        let prefix_actions: Vec<Vec<usize>> =
                            if prefix.is_empty() { vec![vec![]] } else { ranges.collect() };
                        for pa in prefix_actions {
                            let given: Vec<(usize, usize)> = prefix.iter().copied().zip(pa).collect();
                            let mut mean = 0.0;
                            for a in 0..g.n_actions()[agent] {
                                mean += pi.row(agent, s)[a] * multiagent_adv(&g, &pi, &prof, s, &given, &[(agent, a)])?;
                            }
                            worst = worst.max(mean.abs());
                            checks += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(verdict(
        "zero-mean",
        checks,
        worst,
        IDENTITY_TOLERANCE,
        format!("{n_games} random games, every agent, prefix and prefix action"),
    ))
}

/// Both sides of the joint-advantage estimator identity on random (game, pi, pi_bar, pi_hat).
pub fn surrogate_suite(n_tuples: usize, seed: u64) -> Result<SuiteVerdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checks, mut worst) = (0, 0.0_f64);
    let mut made = 0;
    while made < n_tuples {
        let (g, pi) = random_fixture(&mut rng)?;
        if g.n_agents() < 2 {
            continue;
        }
        made += 1;
        let prof = evaluate(&g, &pi)?;
        let n = g.n_agents();
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let m = rng.random_range(1..n + 1);
        let prefix = &order[..m - 1];
        let agent = order[m - 1];
        for s in 0..g.n_states() {
            let bar: Vec<Vec<f64>> = prefix.iter().map(|&k| random_row(&mut rng, g.n_actions()[k])).collect();
            let hat = random_row(&mut rng, g.n_actions()[agent]);

            let mut lhs = 0.0;
            let ranges: Vec<Vec<usize>> = if prefix.is_empty() {
                vec![vec![]]
            } else {
                prefix.iter().map(|&k| 0..g.n_actions()[k]).multi_cartesian_product().collect()
            };
            for pa in ranges {
                let w: f64 = pa.iter().enumerate().map(|(idx, &a)| bar[idx][a]).product();
                let given: Vec<(usize, usize)> = prefix.iter().copied().zip(pa).collect();
                for (a, &h) in hat.iter().enumerate() {
                    lhs += w * h * multiagent_adv(&g, &pi, &prof, s, &given, &[(agent, a)])?;
                }
            }

            let mut rhs = 0.0;
            for j in 0..g.n_joint() {
                let acts = g.joint().decode(j);
                let prob = pi.joint_prob(&g, s, j);
                let own = hat[acts[agent]] / pi.row(agent, s)[acts[agent]] - 1.0;
                let ratio: f64 = prefix
                    .iter()
                    .enumerate()
                    .map(|(idx, &k)| bar[idx][acts[k]] / pi.row(k, s)[acts[k]])
                    .product();
                rhs += prob * own * ratio * prof.advantage(s, j);
            }
            worst = worst.max((lhs - rhs).abs());
            checks += 1;
        }
    }
    Ok(verdict(
        "surrogate",
        checks,
        worst,
        IDENTITY_TOLERANCE,
        format!("{n_tuples} random (game, pi, pi_bar, pi_hat) tuples, every state"),
    ))
}

/// Trust-region iteration never lowers `J` on random games and seeds.
pub fn monotonicity_suite(n_games: usize, n_seeds: usize, rounds: usize, seed: u64) -> Result<SuiteVerdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrustRegionConfig {
        max_outer_iters: rounds,
        log_gaps: false,
        ..Default::default()
    };
    let (mut checks, mut worst_drop) = (0, 0.0_f64);
    for _ in 0..n_games {
        let n = rng.random_range(2..=3);
        let n_states = rng.random_range(2..=5);
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(2..=3)).collect();
        let gamma = rng.random_range(0.5..0.95);
        let game = make_random_game(n, n_states, &actions, gamma, rng.random())?;
        for _ in 0..n_seeds {
            let pi0 = random_policy(&game, &mut rng, 0.05);
            let run = policy_iteration(&game, &pi0, &mut PermutationSampler::uniform(rng.random()), &cfg)?;
            for w in run.j_trajectory().windows(2) {
                worst_drop = worst_drop.max(w[0] - w[1]);
                checks += 1;
            }
        }
    }
    Ok(verdict(
        "monotonicity",
        checks,
        worst_drop,
        MONOTONIC_TOLERANCE,
        format!("{n_games} games x {n_seeds} seeds x {rounds} rounds; worst is the largest drop in J"),
    ))
}

/// Trust-region iteration from random starts ends at a Nash equilibrium of the matrix and XOR games.
pub fn equilibrium_suite(n_seeds: usize, seed: u64) -> Result<SuiteVerdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let games = [("example2", make_matrix_game_example2()), ("xor2", make_xor_team_game(2)?)];
    let (mut checks, mut worst) = (0, 0.0_f64);
    for (_, game) in &games {
        for _ in 0..n_seeds {
            let pi0 = random_policy(game, &mut rng, 0.05);
            let run = policy_iteration(
                game,
                &pi0,
                &mut PermutationSampler::uniform(rng.random()),
                &TrustRegionConfig {
                    log_gaps: false,
                    ..Default::default()
                },
            )?;
            worst = worst.max(run.max_final_gap());
            checks += 1;
        }
    }
    Ok(verdict(
        "equilibrium",
        checks,
        worst,
        GAP_TOLERANCE,
        format!("example2 and xor(n=2), {n_seeds} random starts each; worst is the largest final best-response gap"),
    ))
}

/// The clipped drift satisfies the drift axioms on random fixtures.
pub fn hadf_suite(n_samples: usize, seed: u64) -> Result<SuiteVerdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fixtures = 10;
    let per = n_samples.div_ceil(fixtures);
    let mut passed = true;
    let mut worst = 0.0_f64;
    let mut failures = Vec::new();
    for k in 0..fixtures {
        let n = rng.random_range(2..=3);
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(2..=3)).collect();
        let game = make_random_game(n, rng.random_range(1..=4), &actions, 0.9, rng.random())?;
        let pi = random_policy(&game, &mut rng, 0.05);
        let rep = check_hadf(&ClipReluDrift { eps: 0.2 }, &game, &pi, per, rng.random())?;
        worst = worst.max(rep.worst_negative).max(rep.worst_at_current).max(rep.worst_derivative);
        if !rep.passed {
            passed = false;
            failures.push(format!("fixture {k}: {:?}", rep.witness));
        }
    }
    Ok(SuiteVerdict {
        suite: "hadf".into(),
        passed,
        checks: per * fixtures,
        worst,
        tolerance: 1e-6,
        detail: if failures.is_empty() {
            "clip drift (eps=0.2): non-negative, zero at current, zero directional derivative".into()
        } else {
            failures.join("; ")
        },
    })
}

/// State-wise improvement of the mirror operator implies `V_new >= V_old` everywhere.
pub fn statewise_suite(n_games: usize, seed: u64) -> Result<SuiteVerdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checks, mut worst) = (0, 0.0_f64);
    for k in 0..n_games {
        let (g, pi) = random_fixture(&mut rng)?;
        let drift_coef = rng.random_range(0.0..2.0);
        let rep = if k % 2 == 0 {
            statewise_check(&g, &pi, &KlDrift { coef: drift_coef }, rng.random())?
        } else {
            statewise_check(&g, &pi, &ClipReluDrift { eps: 0.2 }, rng.random())?
        };
        worst = worst.max(-rep.min_value_gain);
        checks += g.n_states();
    }
    Ok(verdict(
        "statewise",
        checks,
        worst,
        1e-9,
        format!("{n_games} random games (KL and clip drifts); worst is the largest per-state value drop"),
    ))
}

/// Mirror-learning iteration with the trust-region and clipped specs on the two-agent matrix game: monotone,
/// and ends at an equilibrium.
pub fn haml_suite(seed: u64) -> Result<SuiteVerdict> {
    let game = make_matrix_game_example2();
    let pi0 = TabularJointPolicy::stationary(&game, |_| vec![0.7, 0.3]);
    let cfg = TrustRegionConfig {
        max_outer_iters: 200,
        log_gaps: false,
        ..Default::default()
    };
    let mut worst = 0.0_f64;
    let mut monotone = true;
    let mut parts = Vec::new();
    for spec in [DriftSpec::trust_region(0.1), DriftSpec::clipped(0.2)] {
        let run = haml_iteration(
            &game,
            &pi0,
            &[spec.clone(), spec.clone()],
            &mut PermutationSampler::uniform(seed),
            &cfg,
        )?;
        let drop = run
            .j_trajectory()
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0_f64, f64::max);
        let gap = run.max_final_gap();
        parts.push(format!("{}: J={} gap={gap:e} drop={drop:e}", spec.describe(), run.final_j()));
        monotone &= drop <= MONOTONIC_TOLERANCE;
        worst = worst.max(gap);
    }
    let mut v = verdict("haml", 2, worst, GAP_TOLERANCE, parts.join("; "));
    v.passed &= monotone;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        for v in [
            decomposition_suite(5, 1).unwrap(),
            zero_mean_suite(5, 1).unwrap(),
            surrogate_suite(5, 1).unwrap(),
            monotonicity_suite(2, 2, 10, 1).unwrap(),
            hadf_suite(200, 1).unwrap(),
            statewise_suite(4, 1).unwrap(),
        ] {
            assert!(v.passed, "{v:?}");
            assert!(v.checks > 0);
        }
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("nope", 0).is_err());
    }
}
