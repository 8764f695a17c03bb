#![allow(dead_code)]

use nalgebra::{Point3, Vector3};
use rand::Rng;
use spreg::tensor::{ParameterStore, Tape, Tensor, Var};
use spreg::RigidTransform;

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

pub fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
            )
        })
        .collect()
}

pub fn random_transform(rng: &mut impl Rng, max_translation: f64) -> RigidTransform {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let t = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ) * max_translation;
    RigidTransform::from_axis_angle(&axis, rng.random_range(-3.1..3.1), t)
}

/// `sum(x ⊙ weights)`, a generic scalar readout of a matrix output.
pub fn readout<'t>(tape: &'t Tape, x: Var<'t>, weights: &Tensor) -> Var<'t> {
    x.mul(tape.constant(weights.clone())).unwrap().sum()
}

/// Largest relative difference between autodiff and central finite
/// differences (`h = 1e-5`) over up to `per_param` entries of each path,
/// counting only entries where either gradient exceeds `1e-6` in magnitude.
pub fn max_gradient_error(
    store: &ParameterStore,
    paths: &[String],
    per_param: usize,
    rng: &mut impl Rng,
    loss: impl for<'t> Fn(&'t Tape, &ParameterStore) -> Var<'t>,
) -> f64 {
    const H: f64 = 1e-5;
    let tape = Tape::new();
    let l = loss(&tape, store);
    let grads = tape.backward(l).unwrap().into_params();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for path in paths {
        let value = store.get(path).unwrap_or_else(|| panic!("missing {path}")).clone();
        let grad = &grads[path];
        let n = value.len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for k in picks {
            let eval = |delta: f64| {
                let mut s = store.clone();
                let mut v = value.clone();
                v.data_mut()[k] += delta;
                s.set(path, v).unwrap();
                let t = Tape::new();
                loss(&t, &s).item()
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let ad = grad.data()[k];
            let mag = ad.abs().max(fd.abs());
            if mag > 1e-6 {
                worst = worst.max((ad - fd).abs() / mag);
                checked += 1;
            }
        }
    }
    assert!(checked > 0, "no gradient entry above the magnitude floor");
    worst
}

/// `count` synthetic cross-source pairs over procedural scenes.
pub fn synthetic_samples(count: usize, seed: u64, extent: f64, cfg: &spreg::Config) -> Vec<spreg::TrainSample> {
    (0..count as u64)
        .map(|i| {
            let scene = spreg::harness::procedural_scene(seed * 1000 + i, extent);
            spreg::harness::synth_cross_source(&scene, seed * 1000 + i, cfg).unwrap().sample
        })
        .collect()
}
