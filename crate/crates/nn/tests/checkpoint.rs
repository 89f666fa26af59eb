use harl_nn::{Activation, Checkpoint, Mlp, MlpSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Mlp::new(&MlpSpec::new(&[4, 8, 3]).hidden(Activation::Tanh), &mut rng).unwrap();
    let mut ckpt = Checkpoint::new(7);
    ckpt.push_mlp("actor", &net);
    ckpt.push_vec("log_std", &[-0.5, 0.25]);
    let dir = std::env::temp_dir().join(format!("harl-nn-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("ckpt.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let x = [0.1, -0.2, 0.3, 0.9];
    assert_eq!(back.mlp("actor").unwrap().forward(&x), net.forward(&x));
    assert_eq!(back.vec("log_std").unwrap(), &[-0.5, 0.25]);
    assert!(back.mlp("log_std").is_err());
    assert!(back.vec("missing").is_err());
    std::fs::remove_dir_all(dir).unwrap();
}
