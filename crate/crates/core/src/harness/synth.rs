use std::f64::consts::{PI, TAU};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::metrics::overlap_ratio;
use crate::cloud::{apply_transform, voxel_downsample, PointCloud, RigidTransform};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::TrainSample;

const MIN_BASE_POINTS: usize = 5000;
const CROP_ATTEMPTS: usize = 20;

/// Surface samples per square metre of procedural geometry.
const DENSITY: f64 = 10.0;

/// A generated pair together with the scale jitter applied to the target.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub sample: TrainSample,
    pub scale: f64,
}

fn sample_rect(rng: &mut impl Rng, origin: Point3<f64>, u: Vector3<f64>, v: Vector3<f64>, out: &mut Vec<Point3<f64>>) {
    let count = (u.cross(&v).norm() * DENSITY).ceil() as usize;
    for _ in 0..count {
        out.push(origin + u * rng.random::<f64>() + v * rng.random::<f64>());
    }
}

/// Vertical faces and roof of a yaw-rotated box standing on `base`.
fn add_box(rng: &mut impl Rng, base: Point3<f64>, size: Vector3<f64>, yaw: f64, out: &mut Vec<Point3<f64>>) {
    let (s, c) = yaw.sin_cos();
    let ex = Vector3::new(c, s, 0.0) * size.x;
    let ey = Vector3::new(-s, c, 0.0) * size.y;
    let ez = Vector3::new(0.0, 0.0, size.z);
    let corner = base - ex / 2.0 - ey / 2.0;
    sample_rect(rng, corner, ex, ez, out);
    sample_rect(rng, corner + ey, ex, ez, out);
    sample_rect(rng, corner, ey, ez, out);
    sample_rect(rng, corner + ex, ey, ez, out);
    sample_rect(rng, corner + ez, ex, ey, out);
}

fn add_cylinder(rng: &mut impl Rng, base: Point3<f64>, radius: f64, height: f64, out: &mut Vec<Point3<f64>>) {
    let count = (TAU * radius * height * DENSITY).ceil().max(8.0) as usize;
    for _ in 0..count {
        let a = rng.random_range(0.0..TAU);
        out.push(base + Vector3::new(radius * a.cos(), radius * a.sin(), rng.random_range(0.0..height)));
    }
}

fn add_sphere(rng: &mut impl Rng, centre: Point3<f64>, radius: f64, out: &mut Vec<Point3<f64>>) {
    let count = (4.0 * PI * radius * radius * DENSITY).ceil() as usize;
    for _ in 0..count {
        let z: f64 = rng.random_range(-1.0..1.0);
        let a = rng.random_range(0.0..TAU);
        let r = (1.0 - z * z).sqrt();
        out.push(centre + Vector3::new(r * a.cos(), r * a.sin(), z) * radius);
    }
}

fn ground_height(x: f64, y: f64, phase: f64) -> f64 {
    0.15 * (0.3 * x + phase).sin() + 0.1 * (0.23 * y - phase).cos()
}

/// A structured outdoor scene of roughly `extent × extent` metres: gently
/// undulating ground with buildings, cars, poles and trees on it.
pub fn procedural_scene(seed: u64, extent: f64) -> PointCloud {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let half = extent / 2.0;
    let phase = rng.random_range(0.0..TAU);
    let mut pts = Vec::new();
    let ground = (extent * extent * DENSITY * 0.6) as usize;
    for _ in 0..ground {
        let x = rng.random_range(-half..half);
        let y = rng.random_range(-half..half);
        pts.push(Point3::new(x, y, ground_height(x, y, phase)));
    }
    let spot = |rng: &mut Xoshiro256PlusPlus, margin: f64| {
        let x = rng.random_range(-half + margin..half - margin);
        let y = rng.random_range(-half + margin..half - margin);
        Point3::new(x, y, ground_height(x, y, phase))
    };
    for _ in 0..rng.random_range(2..5) {
        let base = spot(&mut rng, 4.0);
        let size = Vector3::new(
            rng.random_range(3.0..8.0),
            rng.random_range(3.0..6.0),
            rng.random_range(3.0..7.0),
        );
        let yaw = rng.random_range(0.0..PI);
        add_box(&mut rng, base, size, yaw, &mut pts);
    }
    for _ in 0..rng.random_range(2..6) {
        let base = spot(&mut rng, 2.0);
        let yaw = rng.random_range(0.0..PI);
        add_box(&mut rng, base, Vector3::new(4.2, 1.8, 1.5), yaw, &mut pts);
    }
    for _ in 0..rng.random_range(3..8) {
        let base = spot(&mut rng, 1.0);
        let height = rng.random_range(4.0..7.0);
        add_cylinder(&mut rng, base, 0.15, height, &mut pts);
    }
    for _ in 0..rng.random_range(3..7) {
        let base = spot(&mut rng, 2.0);
        let trunk = rng.random_range(1.5..3.0);
        let crown = rng.random_range(1.2..2.5);
        add_cylinder(&mut rng, base, 0.25, trunk, &mut pts);
        add_sphere(&mut rng, base + Vector3::new(0.0, 0.0, trunk + crown * 0.8), crown, &mut pts);
    }
    PointCloud::new(pts).expect("finite procedural points")
}

fn random_transform(rng: &mut impl Rng, cfg: &Config) -> RigidTransform {
    let tilt = cfg.synth_tilt_deg.to_radians();
    let roll = if tilt > 0.0 { rng.random_range(-tilt..=tilt) } else { 0.0 };
    let pitch = if tilt > 0.0 { rng.random_range(-tilt..=tilt) } else { 0.0 };
    let yaw = rng.random_range(0.0..TAU);
    let translation = loop {
        let v = Vector3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        if v.norm_squared() <= 1.0 {
            break v * cfg.synth_translation;
        }
    };
    RigidTransform::from_euler(roll, pitch, yaw, translation)
}

fn add_noise(cloud: &PointCloud, sigma: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let pts = cloud
        .points()
        .iter()
        .map(|p| p + Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)))
        .collect();
    PointCloud::new(pts)
}

/// Keeps the `keep` fraction of points lying furthest back along a random
/// horizontal direction, a contiguous slab rather than a random subset.
fn crop(cloud: &PointCloud, keep: f64, rng: &mut impl Rng) -> PointCloud {
    if keep >= 1.0 {
        return cloud.clone();
    }
    let a = rng.random_range(0.0..TAU);
    let dir = Vector3::new(a.cos(), a.sin(), 0.0);
    let centre = cloud.centroid().unwrap_or_else(Point3::origin);
    let mut order: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - centre).dot(&dir), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let count = ((cloud.len() as f64 * keep).round() as usize).max(1);
    let mut idx: Vec<usize> = order[..count].iter().map(|&(_, i)| i).collect();
    idx.sort_unstable();
    cloud.select(&idx)
}

/// A cross-source pair from `base`: the two sides differ in voxel size,
/// noise and crop, and the target is moved by a random rigid transform and
/// optionally scaled by a factor in `[0.98, 1.02]`. Crops are redrawn (up to
/// 20 times) until the overlap reaches `synth_min_overlap`.
pub fn synth_cross_source(base: &PointCloud, seed: u64, cfg: &Config) -> Result<SynthPair> {
    if base.len() < MIN_BASE_POINTS {
        return Err(Error::DegenerateInput(format!(
            "base cloud needs at least {MIN_BASE_POINTS} points, got {}",
            base.len()
        )));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let gt = random_transform(&mut rng, cfg);
    let scale = if cfg.synth_scale_jitter { rng.random_range(0.98..=1.02) } else { 1.0 };

    let src_full = add_noise(&voxel_downsample(base, cfg.synth_voxel_src)?, cfg.synth_noise_src, &mut rng)?;
    let moved = apply_transform(base, &gt);
    let scaled = PointCloud::new(moved.points().iter().map(|p| Point3::from(p.coords * scale)).collect())?;
    let tgt_full = add_noise(&voxel_downsample(&scaled, cfg.synth_voxel_tgt)?, cfg.synth_noise_tgt, &mut rng)?;

    let mut best = 0.0;
    for _ in 0..CROP_ATTEMPTS {
        let source = crop(&src_full, cfg.synth_crop_src, &mut rng);
        let target = crop(&tgt_full, cfg.synth_crop_tgt, &mut rng);
        let overlap = overlap_ratio(&source, &target, &gt, cfg.tau_a);
        if overlap >= cfg.synth_min_overlap {
            return Ok(SynthPair {
                sample: TrainSample {
                    source,
                    target,
                    gt,
                    overlap,
                },
                scale,
            });
        }
        best = f64::max(best, overlap);
    }
    Err(Error::DegenerateInput(format!(
        "overlap stayed below {} after {CROP_ATTEMPTS} crops (best {best:.3})",
        cfg.synth_min_overlap
    )))
}
