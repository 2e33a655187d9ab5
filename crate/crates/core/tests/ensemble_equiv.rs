//! Factored forwards against materialized weights, and checkpoint fidelity.

use edens_core::ensemble::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
use edens_core::numerics::RngStream;
use edens_core::tensor::Array;
use edens_core::{Architecture, BaselineNet, EnsembleNet};

fn random_net(seed: u64, in_dim: usize, classes: usize, members: usize, rank: usize) -> EnsembleNet {
    let mut rng = RngStream::from_seed(seed);
    let base = BaselineNet::init(Architecture::mlp(in_dim, classes), &mut rng).unwrap();
    EnsembleNet::init_from_pretrained(&base, members, rank, 0.3, &mut rng).unwrap()
}

#[test]
fn grouped_agrees_with_materialized_on_100_random_nets() {
    for trial in 0..100 {
        let mut rng = RngStream::from_seed(4000 + trial);
        let members = 2 + (trial % 3) as usize;
        let rank = 1 + (trial % 2) as usize;
        let net = random_net(trial, 3, 3, members, rank);
        let x = Array::from_vec(&[4, 3], rng.normal_vec(12, 1.0)).unwrap();
        let grouped = net.all_member_logits(&x).unwrap();
        for m in 0..members {
            let reference = net.materialized_logits(m, &x).unwrap();
            let diff = grouped[m].max_abs_diff(&reference);
            assert!(
                diff < 1e-6,
                "trial {trial}, member {m}: grouped vs materialized diff {diff}"
            );
        }
    }
}

#[test]
fn grouped_agrees_with_materialized_conv_profile() {
    for trial in 0..10 {
        let mut rng = RngStream::from_seed(4200 + trial);
        let base = BaselineNet::init(Architecture::conv_small(1, 8, 8, 3), &mut rng).unwrap();
        let net = EnsembleNet::init_from_pretrained(&base, 2, 2, 0.3, &mut rng).unwrap();
        let x = Array::from_vec(&[2, 1, 8, 8], rng.normal_vec(128, 1.0)).unwrap();
        let grouped = net.all_member_logits(&x).unwrap();
        for m in 0..2 {
            let reference = net.materialized_logits(m, &x).unwrap();
            let diff = grouped[m].max_abs_diff(&reference);
            assert!(diff < 1e-6, "trial {trial}, member {m}: diff {diff}");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let net = random_net(99, 5, 4, 3, 2);
    let ckpt = Checkpoint::ensemble(1234, net);
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(
        loaded.as_ensemble().unwrap().fingerprint(),
        ckpt.as_ensemble().unwrap().fingerprint()
    );
    assert_eq!(loaded.seed, 1234);
}

#[test]
fn baseline_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("baseline.json");
    let mut rng = RngStream::from_seed(7);
    let base = BaselineNet::init(Architecture::mlp(2, 2), &mut rng).unwrap();
    let ckpt = Checkpoint::baseline(7, base);
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert!(loaded.as_ensemble().is_err());
}

#[test]
fn future_version_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let net = random_net(1, 2, 2, 2, 1);
    let mut ckpt = Checkpoint::ensemble(1, net);
    ckpt.version = CHECKPOINT_VERSION + 1;
    let json = serde_json::to_string(&ckpt).unwrap();
    std::fs::write(&path, json).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn corrupted_payload_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let net = random_net(2, 2, 2, 2, 1);
    save_checkpoint(&path, &Checkpoint::ensemble(2, net)).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.truncate(text.len() / 2);
    std::fs::write(&path, text).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
