//! Autodiff against central finite differences on the model's composite graphs.

mod common;

use common::{max_gradient_error, random_points, random_tensor, readout};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use spreg::cloud::PointCloud;
use spreg::config::Config;
use spreg::encoder::{self, cross_attention_layer, self_attention_layer, Geometry};
use spreg::matching::log_sinkhorn;
use spreg::pipeline::{overlap_circle_loss, point_matching_loss};
use spreg::skeleton::{self, extract_skeleton, skeleton_from_weights, skeleton_loss_with, sphere_directions};
use spreg::tensor::{ParameterStore, Tensor, WeightInit};

const TOLERANCE: f64 = 1e-4;
const INSTANCES: u64 = 5;

fn small_config() -> Config {
    let mut cfg = Config::toy();
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.interleave = 1;
    cfg.skeleton_points = 4;
    cfg.skeleton_knn = 3;
    cfg.angle_knn = 3;
    cfg
}

fn insert(store: &mut ParameterStore, path: &str, value: Tensor) -> String {
    store.insert(path, value).unwrap();
    path.to_string()
}

fn paths_with(store: &ParameterStore, prefixes: &[&str]) -> Vec<String> {
    store
        .paths()
        .filter(|p| prefixes.iter().any(|pre| p.starts_with(pre)))
        .map(str::to_string)
        .collect()
}

#[test]
fn skeleton_extraction_gradients() {
    let cfg = small_config();
    for seed in 0..INSTANCES {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        skeleton::init_params(&mut store, &cfg, &mut rng).unwrap();
        let n = 10;
        let cloud = PointCloud::new(random_points(&mut rng, n, 3.0)).unwrap();
        // The weight MLP sees detached features, so finite differences in the
        // features would disagree by design; only the module's own weights
        // are checked.
        insert(&mut store, "input.features", random_tensor(&mut rng, n, cfg.d_model, 1.0));
        let (r1, r2, r3) = (
            random_tensor(&mut rng, cfg.skeleton_points, 3, 1.0),
            random_tensor(&mut rng, cfg.skeleton_points, cfg.d_model, 1.0),
            random_tensor(&mut rng, cfg.skeleton_points, 1, 1.0),
        );
        let paths = paths_with(&store, &["skeleton."]);
        let err = max_gradient_error(&store, &paths, 40, &mut rng, |tape, s| {
            let f = tape.param(s, "input.features").unwrap();
            let skel = extract_skeleton(tape, &cloud, f, s).unwrap();
            readout(tape, skel.points, &r1)
                .add(readout(tape, skel.features, &r2))
                .unwrap()
                .add(readout(tape, skel.radii, &r3))
                .unwrap()
        });
        assert!(err < TOLERANCE, "seed {seed}: relative error {err}");
    }
}

#[test]
fn self_attention_gradients() {
    let cfg = small_config();
    for seed in 0..INSTANCES {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(100 + seed);
        let mut store = ParameterStore::new();
        encoder::init_params(&mut store, &cfg, &mut rng).unwrap();
        let positions = random_points(&mut rng, 8, 5.0);
        let skel = random_points(&mut rng, 3, 3.0);
        let geom = Geometry::new(&positions, &skel, &cfg).unwrap();
        let x = insert(&mut store, "input.x", random_tensor(&mut rng, 8, cfg.d_model, 1.0));
        let r = random_tensor(&mut rng, 8, cfg.d_model, 1.0);
        let mut paths = paths_with(&store, &["encoder.round0.self", "encoder.embed"]);
        paths.push(x);
        let err = max_gradient_error(&store, &paths, 12, &mut rng, |tape, s| {
            let x = tape.param(s, "input.x").unwrap();
            let out = self_attention_layer(tape, x, &geom.vars(tape), s, "encoder.round0.self", &cfg).unwrap();
            readout(tape, out.output, &r)
        });
        assert!(err < TOLERANCE, "seed {seed}: relative error {err}");
    }
}

#[test]
fn cross_attention_gradients() {
    let cfg = small_config();
    for seed in 0..INSTANCES {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(200 + seed);
        let mut store = ParameterStore::new();
        encoder::init_params(&mut store, &cfg, &mut rng).unwrap();
        let (lp, lq) = (7, 6);
        let mut paths = paths_with(&store, &["encoder.round0.cross"]);
        for (name, rows) in [("input.xp", lp), ("input.pp", lp), ("input.xq", lq), ("input.pq", lq)] {
            paths.push(insert(&mut store, name, random_tensor(&mut rng, rows, cfg.d_model, 1.0)));
        }
        let (r1, r2) = (
            random_tensor(&mut rng, lp, cfg.d_model, 1.0),
            random_tensor(&mut rng, lq, cfg.d_model, 1.0),
        );
        let err = max_gradient_error(&store, &paths, 12, &mut rng, |tape, s| {
            let v = |name: &str| tape.param(s, name).unwrap();
            let (cp, cq) = cross_attention_layer(
                tape,
                v("input.xp"),
                v("input.pp"),
                lp,
                v("input.xq"),
                v("input.pq"),
                lq - 1,
                s,
                "encoder.round0.cross",
                &cfg,
            )
            .unwrap();
            readout(tape, cp.output, &r1).add(readout(tape, cq.output, &r2)).unwrap()
        });
        assert!(err < TOLERANCE, "seed {seed}: relative error {err}");
    }
}

#[test]
fn circle_loss_gradients() {
    for adaptive in [true, false] {
        let cfg = Config {
            circle_adaptive: adaptive,
            ..Config::toy()
        };
        for seed in 0..INSTANCES {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(300 + seed);
            let (n, m, d) = (6, 5, 8);
            let mut store = ParameterStore::new();
            let paths = vec![
                insert(&mut store, "input.hp", random_tensor(&mut rng, n, d, 1.0)),
                insert(&mut store, "input.hq", random_tensor(&mut rng, m, d, 1.0)),
            ];
            let overlaps = Tensor::new(
                n,
                m,
                (0..n * m)
                    .map(|_| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..1.0) })
                    .collect(),
            )
            .unwrap();
            let err = max_gradient_error(&store, &paths, 64, &mut rng, |tape, s| {
                let hp = tape.param(s, "input.hp").unwrap();
                let hq = tape.param(s, "input.hq").unwrap();
                overlap_circle_loss(hp, hq, &overlaps, &cfg).unwrap()
            });
            assert!(err < TOLERANCE, "adaptive {adaptive}, seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn point_matching_loss_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(400 + seed);
        let (m, n) = (4, 5);
        let mut store = ParameterStore::new();
        let paths = vec![
            insert(&mut store, "input.scores", random_tensor(&mut rng, m, n, 2.0)),
            insert(&mut store, "input.slack", Tensor::scalar(rng.random_range(-1.0..1.0))),
        ];
        let gt: Vec<bool> = (0..m * n).map(|_| rng.random_bool(0.2)).collect();
        let err = max_gradient_error(&store, &paths, 64, &mut rng, |tape, s| {
            let scores = tape.param(s, "input.scores").unwrap();
            let slack = tape.param(s, "input.slack").unwrap();
            point_matching_loss(log_sinkhorn(scores, slack, 30).unwrap(), &gt).unwrap()
        });
        assert!(err < TOLERANCE, "seed {seed}: relative error {err}");
    }
}

#[test]
fn skeleton_loss_gradients() {
    let cfg = small_config();
    for seed in 0..INSTANCES {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(500 + seed);
        let (n, ns) = (12, cfg.skeleton_points);
        let cloud = PointCloud::new(random_points(&mut rng, n, 3.0)).unwrap();
        let directions = sphere_directions(ns * cfg.sphere_samples, &mut rng);
        let mut store = ParameterStore::new();
        let paths = vec![insert(&mut store, "input.logits", random_tensor(&mut rng, n, ns, 2.0))];
        store
            .init("input.features", n, cfg.d_model, WeightInit::Constant(0.5), &mut rng)
            .unwrap();
        let err = max_gradient_error(&store, &paths, 64, &mut rng, |tape, s| {
            let w = tape.param(s, "input.logits").unwrap().col_softmax();
            let f = tape.param(s, "input.features").unwrap();
            let skel = skeleton_from_weights(tape, &cloud, f, w).unwrap();
            skeleton_loss_with(&cloud, &skel, &directions, &cfg).unwrap().total
        });
        assert!(err < TOLERANCE, "seed {seed}: relative error {err}");
    }
}
