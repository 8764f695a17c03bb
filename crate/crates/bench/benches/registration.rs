use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::Vector3;
use spreg::cloud::{voxel_downsample, SpatialIndex};
use spreg::harness::{procedural_scene, synth_cross_source};
use spreg::matching::weighted_procrustes;
use spreg::pipeline::{init_model, register};
use spreg::{Config, RigidTransform};

fn geometry(c: &mut Criterion) {
    let scene = procedural_scene(1, 28.0);
    c.bench_function("voxel_downsample 0.3", |b| b.iter(|| voxel_downsample(black_box(&scene), 0.3).unwrap()));

    let index = SpatialIndex::new(&scene);
    let queries: Vec<_> = scene.points().iter().step_by(50).copied().collect();
    c.bench_function("kd-tree build", |b| b.iter(|| SpatialIndex::new(black_box(&scene))));
    c.bench_function("kd-tree 16-nn", |b| {
        b.iter(|| {
            for q in &queries {
                black_box(index.knn(q, 16).unwrap());
            }
        })
    });

    let t = RigidTransform::from_euler(0.1, -0.05, 1.2, Vector3::new(2.0, -1.0, 0.3));
    let src: Vec<_> = scene.points().iter().take(1000).copied().collect();
    let tgt: Vec<_> = src.iter().map(|p| t.apply(p)).collect();
    let w = vec![1.0; src.len()];
    c.bench_function("weighted_procrustes 1000", |b| {
        b.iter(|| weighted_procrustes(black_box(&src), black_box(&tgt), &w).unwrap())
    });
}

fn pipeline(c: &mut Criterion) {
    let cfg = Config::toy();
    let params = init_model(&cfg).unwrap();
    let scene = procedural_scene(2, 28.0);
    let pair = synth_cross_source(&scene, 2, &cfg).unwrap().sample;
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("register toy pair", |b| {
        b.iter(|| register(black_box(&pair.source), black_box(&pair.target), &params, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, geometry, pipeline);
criterion_main!(benches);
