use std::sync::Arc;

use harl_core::game::{make_matrix_game_example2, make_xor_team_game};
use harl_engines::offpolicy::{run_had3qn, OffPolicyAlgorithm, OffPolicyConfig};
use harl_engines::{run_training, OnPolicyAlgorithm, TrainConfig};

fn small(algorithm: OnPolicyAlgorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        n_threads: 8,
        episode_length: 4,
        total_env_steps: 8 * 4 * 150,
        actor_lr: 0.05,
        critic_lr: 0.1,
        ..Default::default()
    }
}

#[test]
fn on_policy_algorithms_solve_the_matrix_game() {
    let game = Arc::new(make_matrix_game_example2());
    for alg in [OnPolicyAlgorithm::Happo, OnPolicyAlgorithm::Hatrpo, OnPolicyAlgorithm::Haa2c] {
        let run = run_training(game.clone(), &small(alg), 0).unwrap();
        let score = run.exact_score().unwrap();
        assert_eq!(score.greedy, 2.0, "{alg:?}");
    }
}

#[test]
fn runs_are_reproducible() {
    let game = Arc::new(make_xor_team_game(4).unwrap());
    let cfg = small(OnPolicyAlgorithm::Happo);
    let a = run_training(game.clone(), &cfg, 4).unwrap();
    let b = run_training(game, &cfg, 4).unwrap();
    assert_eq!(a.exact_score().unwrap().stochastic, b.exact_score().unwrap().stochastic);
}

#[test]
fn had3qn_learns_the_matrix_game() {
    let game = Arc::new(make_matrix_game_example2());
    let cfg = OffPolicyConfig {
        algorithm: OffPolicyAlgorithm::Had3qn,
        total_env_steps: 20_000,
        warmup_steps: 500,
        buffer_size: 5_000,
        batch_size: 32,
        train_interval: 5,
        epsilon: 0.3,
        critic_lr: 0.01,
        actor_lr: 0.01,
        polyak: 0.05,
        ..Default::default()
    };
    let run = run_had3qn(game, &cfg, 1).unwrap();
    assert_eq!(run.exact_return().unwrap(), 2.0);
}
