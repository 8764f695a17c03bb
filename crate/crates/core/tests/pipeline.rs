//! Losses, training, checkpoints and end-to-end registration.

mod common;

use common::{random_tensor, synthetic_samples};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use spreg::cloud::{apply_transform, RigidTransform};
use spreg::config::Config;
use spreg::harness::procedural_scene;
use spreg::pipeline::{
    init_model, load_checkpoint, overlap_circle_loss, point_matching_loss, register, save_checkpoint, train_epoch,
    Checkpoint, TrainState,
};
use spreg::tensor::{Tape, Tensor};
use spreg::Error;

fn linear_circle() -> Config {
    Config {
        circle_adaptive: false,
        ..Config::toy()
    }
}

#[test]
fn circle_loss_without_anchors_is_zero() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    let tape = Tape::new();
    let hp = tape.constant(random_tensor(&mut rng, 4, 8, 1.0));
    let hq = tape.constant(random_tensor(&mut rng, 3, 8, 1.0));
    for cfg in [Config::toy(), linear_circle()] {
        let loss = overlap_circle_loss(hp, hq, &Tensor::zeros(4, 3), &cfg).unwrap();
        assert_eq!(loss.item(), 0.0);
    }
}

#[test]
fn single_positive_at_zero_distance() {
    let tape = Tape::new();
    let h = tape.constant(Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap());
    let o = 0.64;
    let overlaps = Tensor::scalar(o);
    let cfg = linear_circle();
    let lambda = o.sqrt();
    let expected = (1.0 + (-lambda * cfg.circle_scale * cfg.circle_pos_margin).exp()).ln();
    let loss = overlap_circle_loss(h, h, &overlaps, &cfg).unwrap().item();
    assert!((loss - expected).abs() < 1e-12);
    // Inside the positive margin the hinge is flat: softplus(0) / β.
    let cfg = Config::toy();
    let loss = overlap_circle_loss(h, h, &overlaps, &cfg).unwrap().item();
    assert!((loss - 2f64.ln() / cfg.circle_scale).abs() < 1e-12);
}

#[test]
fn point_matching_examples() {
    let tape = Tape::new();
    let gt = [true, false, false, true];
    // One-hot at the ground truth: −log 1 = 0.
    let mut one_hot = Tensor::full(3, 3, -1e3);
    one_hot.set(0, 0, 0.0);
    one_hot.set(1, 1, 0.0);
    let loss = point_matching_loss(tape.constant(one_hot), &gt).unwrap().item();
    assert_eq!(loss, 0.0);
    // Uniform over a 2×2 patch plus slack: every row assigns 1/3.
    let uniform = Tensor::full(3, 3, (1.0f64 / 3.0).ln());
    let loss = point_matching_loss(tape.constant(uniform.clone()), &gt).unwrap().item();
    assert!((loss - 3f64.ln()).abs() < 1e-12);
    // Unmatched rows and columns are scored at the slack entries.
    let loss = point_matching_loss(tape.constant(uniform), &[false; 4]).unwrap().item();
    assert!((loss - 3f64.ln()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn circle_loss_is_non_negative(seed in 0u64..10_000, adaptive in any::<bool>()) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let cfg = Config { circle_adaptive: adaptive, ..Config::toy() };
        let tape = Tape::new();
        let hp = tape.constant(random_tensor(&mut rng, 5, 6, 1.0));
        let hq = tape.constant(random_tensor(&mut rng, 4, 6, 1.0));
        let overlaps = random_tensor(&mut rng, 5, 4, 1.0).map(|v| v.max(0.0));
        prop_assert!(overlap_circle_loss(hp, hq, &overlaps, &cfg).unwrap().item() >= 0.0);
    }

    #[test]
    fn point_matching_loss_is_non_negative(seed in 0u64..10_000) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let tape = Tape::new();
        let scores = tape.constant(random_tensor(&mut rng, 3, 4, 3.0));
        let log_p = spreg::matching::log_sinkhorn(scores, tape.constant(Tensor::scalar(1.0)), 50).unwrap();
        let gt: Vec<bool> = random_tensor(&mut rng, 3, 4, 1.0).data().iter().map(|&v| v > 0.5).collect();
        prop_assert!(point_matching_loss(log_p, &gt).unwrap().item() >= -1e-9);
    }
}

#[test]
fn training_is_deterministic_and_makes_progress() {
    let cfg = Config::toy();
    let data = synthetic_samples(8, 3, 20.0, &cfg);
    let run = |epochs: usize| {
        let mut state = TrainState::new(&cfg).unwrap();
        let metrics: Vec<_> = (0..epochs).map(|_| train_epoch(&data, &mut state, &cfg).unwrap()).collect();
        (metrics, state)
    };
    let (a, state_a) = run(2);
    let (b, state_b) = run(2);
    assert_eq!(a, b);
    assert_eq!(state_a.params.to_bytes(), state_b.params.to_bytes());
    for m in &a {
        assert!(m.loss.is_finite() && m.circle >= 0.0 && m.matching >= 0.0);
        assert_eq!(m.skipped, 0);
    }

    let (long, _) = run(20);
    assert!(long[19].loss < long[0].loss, "{} vs {}", long[19].loss, long[0].loss);
}

#[test]
fn skeleton_only_training_leaves_other_modules_alone() {
    let cfg = Config {
        registration_loss: false,
        weight_decay: 0.0,
        ..Config::toy()
    };
    let data = synthetic_samples(2, 4, 20.0, &cfg);
    let mut state = TrainState::new(&cfg).unwrap();
    let before = state.params.clone();
    train_epoch(&data, &mut state, &cfg).unwrap();
    let mut skeleton_moved = false;
    for (path, value) in before.iter() {
        let after = state.params.get(path).unwrap();
        if path.starts_with("skeleton.") {
            skeleton_moved |= after != value;
        } else {
            assert_eq!(after, value, "{path} changed");
        }
    }
    assert!(skeleton_moved);
}

#[test]
fn empty_dataset_is_an_error() {
    let cfg = Config::toy();
    let mut state = TrainState::new(&cfg).unwrap();
    assert!(train_epoch(&[], &mut state, &cfg).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = Config {
        seed: 11,
        ..Config::toy()
    };
    let mut state = TrainState::new(&cfg).unwrap();
    state.epoch = 7;
    let ckpt = Checkpoint::from_state(&state, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.spwt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.epoch, 7);
    assert_eq!(back.config, cfg);
    assert_eq!(back.rng_state, ckpt.rng_state);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    let resumed = back.to_state().unwrap();
    assert_eq!(Checkpoint::from_state(&resumed, &cfg).rng_state, ckpt.rng_state);

    // The stored hash must match the stored config text.
    let mut bytes = ckpt.to_bytes();
    let hash_at = ckpt.params.to_bytes().len() + 4;
    bytes[hash_at] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    let full = ckpt.to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&full[..full.len() - 3]), Err(Error::Format(_))));
}

#[test]
fn untrained_registration_is_total_and_deterministic() {
    let cfg = Config::toy();
    let params = init_model(&cfg).unwrap();
    let sample = &synthetic_samples(1, 5, 20.0, &cfg)[0];
    let a = register(&sample.source, &sample.target, &params, &cfg).unwrap();
    assert!(a.transform.is_valid(1e-9));
    let b = register(&sample.source, &sample.target, &params, &cfg).unwrap();
    assert_eq!(a.transform, b.transform);
    assert_eq!(a.dense, b.dense);
    assert!(a.hybrid.len() <= cfg.coarse_cap - cfg.replace_count + cfg.skeletal_top);
}

#[test]
fn self_registration_is_near_identity() {
    let cfg = Config::toy();
    let params = init_model(&cfg).unwrap();
    let scene = procedural_scene(6, 20.0);
    let res = register(&scene, &scene, &params, &cfg).unwrap();
    let id = RigidTransform::identity();
    assert!((res.transform.translation - id.translation).norm() < 1e-3);
    assert!(res.transform.rotation_angle().to_degrees() < 0.01);
    // A moved copy at least keeps the pipeline total.
    let t = RigidTransform::from_euler(0.0, 0.0, 0.4, nalgebra::Vector3::new(2.0, -1.0, 0.0));
    let moved = apply_transform(&scene, &t);
    assert!(register(&scene, &moved, &params, &cfg).unwrap().transform.is_valid(1e-9));
}
