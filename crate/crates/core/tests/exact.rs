use harl_core::game::{make_grid_rendezvous, make_random_game, make_xor_team_game};
use harl_core::hatrl::policy_iteration;
use harl_core::oracle::{best_response_gap, optimal_joint_value};
use harl_core::{evaluate, CooperativeMarkovGame, PermutationSampler, TabularJointPolicy, TrustRegionConfig};

#[test]
fn game_documents_round_trip() {
    let g = make_random_game(3, 4, &[2, 3, 2], 0.9, 11).unwrap();
    let back = CooperativeMarkovGame::from_json(&g.to_json().unwrap()).unwrap();
    let pi = TabularJointPolicy::uniform(&g);
    assert_eq!(evaluate(&g, &pi).unwrap().j, evaluate(&back, &pi).unwrap().j);
}

#[test]
fn policy_iteration_improves_monotonically_below_the_optimum() {
    let g = make_grid_rendezvous(2, 2, 4, 0.9).unwrap();
    let pi0 = TabularJointPolicy::uniform(&g);
    let run = policy_iteration(&g, &pi0, &mut PermutationSampler::uniform(5), &TrustRegionConfig::default()).unwrap();
    let js = run.j_trajectory();
    assert!(js.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{js:?}");
    assert!(run.final_j() > run.initial_j);
    assert_eq!(run.final_gaps, best_response_gap(&g, &run.final_policy).unwrap().gaps);
    let (opt, _) = optimal_joint_value(&g).unwrap();
    assert!(run.final_j() <= opt + 1e-9);
}

#[test]
fn xor_uniform_policy_value() {
    for n in [2, 4, 6] {
        let g = make_xor_team_game(n).unwrap();
        let j = evaluate(&g, &TabularJointPolicy::uniform(&g)).unwrap().j;
        assert!((j - 2.0 / 2f64.powi(n as i32)).abs() < 1e-12);
    }
}

