//! One gradient round on the two-agent differentiable game, simultaneous versus sequential.

use harl_core::game::ContinuousTwoAgentGame;
use harl_nn::mlp::{Activation, Mlp, MlpSpec};
use harl_nn::optim::Adam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::offpolicy::{ActionCritic, MlpCritic};

/// The true reward as a critic; the game's analytic gradient when it has one, central differences
/// otherwise.
pub struct RewardCritic(pub ContinuousTwoAgentGame);

impl ActionCritic for RewardCritic {
    fn q_and_action_grad(&self, _x: &[f64], a: &[f64]) -> (f64, Vec<f64>) {
        let r = |a1: f64, a2: f64| self.0.reward(a1, a2);
        let g = self.0.gradient(a[0], a[1]).unwrap_or_else(|| {
            let h = 1e-5;
            [
                (r(a[0] + h, a[1]) - r(a[0] - h, a[1])) / (2.0 * h),
                (r(a[0], a[1] + h) - r(a[0], a[1] - h)) / (2.0 * h),
            ]
        });
        (r(a[0], a[1]), g.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundTrace {
    /// Joint action after each agent's step, starting with the initial point.
    pub points: Vec<[f64; 2]>,
    pub reward_before: f64,
    pub reward_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffGameReport {
    pub start: [f64; 2],
    pub learning_rate: f64,
    pub simultaneous: RoundTrace,
    pub sequential: RoundTrace,
}

/// One ascent round on `critic` from `start`, scored by the true reward. Simultaneous: both agents
/// step from the gradient at `start`. Sequential: agent 1 steps first, agent 2 then steps from the
/// gradient at agent 1's new action.
pub fn gradient_round(
    game: &ContinuousTwoAgentGame,
    critic: &dyn ActionCritic,
    start: [f64; 2],
    lr: f64,
    sequential: bool,
) -> RoundTrace {
    let mut points = vec![start];
    let (_, g) = critic.q_and_action_grad(&[], &start);
    let mut a = start;
    a[0] += lr * g[0];
    if sequential {
        points.push(a);
        let (_, g2) = critic.q_and_action_grad(&[], &a);
        a[1] += lr * g2[1];
    } else {
        a[1] += lr * g[1];
    }
    points.push(a);
    RoundTrace { points, reward_before: game.reward(start[0], start[1]), reward_after: game.reward(a[0], a[1]) }
}

pub fn exact_report(game: &ContinuousTwoAgentGame, start: [f64; 2], lr: f64) -> DiffGameReport {
    let critic = RewardCritic(*game);
    DiffGameReport {
        start,
        learning_rate: lr,
        simultaneous: gradient_round(game, &critic, start, lr, false),
        sequential: gradient_round(game, &critic, start, lr, true),
    }
}

/// Regress an MLP critic onto the game's reward from uniform samples over `[-range, range]^2`.
pub fn fit_critic(game: &ContinuousTwoAgentGame, range: f64, n_samples: usize, steps: usize, seed: u64) -> Result<MlpCritic> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<([f64; 2], f64)> = (0..n_samples)
        .map(|_| {
            let a = [rng.random_range(-range..=range), rng.random_range(-range..=range)];
            (a, game.reward(a[0], a[1]))
        })
        .collect();
    let net = Mlp::new(&MlpSpec::new(&[2, 32, 32, 1]).hidden(Activation::Tanh).gains(1.0, 1.0), &mut rng)?;
    let mut critic = MlpCritic { net };
    let mut opt = Adam::new(critic.net.n_params(), 3e-3);
    let batch = 128.min(n_samples);
    for _ in 0..steps {
        let mut grad = vec![0.0; critic.net.n_params()];
        for _ in 0..batch {
            let (a, r) = data[rng.random_range(0..n_samples)];
            let trace = critic.net.forward_trace(&[a[0] / range, a[1] / range]);
            let q = trace.output()[0];
            critic.net.backward(&trace, &[(q - r) / batch as f64], &mut grad);
        }
        opt.step(critic.net.params_mut(), &grad);
    }
    Ok(critic)
}

/// A fitted critic whose inputs are rescaled from action units.
pub struct ScaledCritic {
    pub critic: MlpCritic,
    pub range: f64,
}

impl ActionCritic for ScaledCritic {
    fn q_and_action_grad(&self, _x: &[f64], a: &[f64]) -> (f64, Vec<f64>) {
        let scaled: Vec<f64> = a.iter().map(|v| v / self.range).collect();
        let (q, g) = self.critic.q_and_action_grad(&[], &scaled);
        (q, g.iter().map(|v| v / self.range).collect())
    }
}

/// Paired comparison with a critic learned from samples: (simultaneous, sequential) true reward
/// after one round, per seed.
pub fn learned_critic_rounds(game: &ContinuousTwoAgentGame, start: [f64; 2], lr: f64, seeds: &[u64]) -> Result<Vec<(f64, f64)>> {
    let range = 3.0;
    seeds
        .iter()
        .map(|&seed| {
            let critic = ScaledCritic { critic: fit_critic(game, range, 2000, 3000, seed)?, range };
            let sim = gradient_round(game, &critic, start, lr, false).reward_after;
            let seq = gradient_round(game, &critic, start, lr, true).reward_after;
            Ok((sim, seq))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use harl_core::game::make_diff_game;

    #[test]
    fn closed_form_rounds() {
        let r = exact_report(&make_diff_game(), [1.0, -1.0], 3.0);
        // gradient at (1, -1) is (-1, 1)
        let sim = r.simultaneous.points.last().unwrap();
        assert_eq!(*sim, [-2.0, 2.0]);
        assert_eq!(r.simultaneous.reward_after, -4.0);
        let seq = r.sequential.points.last().unwrap();
        assert_eq!(*seq, [-2.0, -7.0]);
        assert_eq!(r.sequential.reward_after, 14.0);
        assert_eq!(r.simultaneous.reward_before, -1.0);
    }

    #[test]
    fn difference_gradient_fallback() {
        let g = ContinuousTwoAgentGame::new(|a1, a2| a1 * a2 - a1 * a1);
        let (_, grad) = RewardCritic(g).q_and_action_grad(&[], &[0.5, -1.0]);
        assert!((grad[0] + 2.0).abs() < 1e-8 && (grad[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn moderate_step_does_not_separate_schemes() {
        // at lr 1.5 the simultaneous round still raises the reward: (-0.5, 0.5) gives -0.25 > -1
        let r = exact_report(&make_diff_game(), [1.0, -1.0], 1.5);
        assert!(r.simultaneous.reward_after > r.simultaneous.reward_before);
    }
}
