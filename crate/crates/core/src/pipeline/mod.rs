//! End-to-end registration, the registration losses and training.

mod checkpoint;
mod loss;
mod train;

use std::time::Instant;

use nalgebra::Point3;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::backbone::{self, extract_pyramid, FeaturePyramid};
use crate::cloud::{voxel_downsample, PointCloud, RigidTransform};
use crate::config::Config;
use crate::encoder::{self, encode, HybridFeatures};
use crate::error::{Error, Result};
use crate::matching::{
    build_compatibility, coarse_match, dense_match, hybrid_resample, local_to_global, spectral_denoise,
    weighted_procrustes, Correspondence, CorrespondenceKind, CorrespondenceSet, PointMatch,
};
use crate::skeleton::{self, extract_skeleton, Skeleton};
use crate::tensor::{ParameterStore, Tape, WeightInit};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{overlap_circle_loss, patch_gt_matches, patch_overlaps, point_matching_loss};
pub use train::{train_epoch, EpochMetrics, TrainState};

/// Path of the learnable Sinkhorn slack score.
pub const SLACK_PARAM: &str = "matching.slack";

/// A training pair: `target ≈ gt · source`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: RigidTransform,
    pub overlap: f64,
}

/// Fresh model parameters, seeded from `cfg.seed`.
pub fn init_model(cfg: &Config) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut store = ParameterStore::new();
    backbone::init_params(&mut store, cfg, &mut rng)?;
    skeleton::init_params(&mut store, cfg, &mut rng)?;
    encoder::init_params(&mut store, cfg, &mut rng)?;
    store.init(SLACK_PARAM, 1, 1, WeightInit::Constant(1.0), &mut rng)?;
    Ok(store)
}

/// Voxel preprocessing applied to every input cloud.
pub fn preprocess(cloud: &PointCloud, cfg: &Config) -> Result<PointCloud> {
    let out = voxel_downsample(cloud, cfg.preprocess_voxel)?;
    if out.is_empty() {
        return Err(Error::DegenerateInput("empty cloud".into()));
    }
    Ok(out)
}

/// The learned stages for one preprocessed pair.
pub struct Forward<'t> {
    pub src: FeaturePyramid<'t>,
    pub tgt: FeaturePyramid<'t>,
    pub src_skeleton: Skeleton<'t>,
    pub tgt_skeleton: Skeleton<'t>,
    pub src_features: HybridFeatures<'t>,
    pub tgt_features: HybridFeatures<'t>,
}

/// Backbone, skeleton extraction and encoder for both clouds.
pub fn forward<'t>(
    tape: &'t Tape,
    src: &PointCloud,
    tgt: &PointCloud,
    store: &ParameterStore,
    cfg: &Config,
) -> Result<Forward<'t>> {
    let pyr_src = extract_pyramid(tape, src, store, cfg)?;
    let pyr_tgt = extract_pyramid(tape, tgt, store, cfg)?;
    let skel_src = extract_skeleton(tape, pyr_src.superpoints(), pyr_src.superpoint_features(), store)?;
    let skel_tgt = extract_skeleton(tape, pyr_tgt.superpoints(), pyr_tgt.superpoint_features(), store)?;
    let (f_src, f_tgt) = encode(tape, &pyr_src, &skel_src, &pyr_tgt, &skel_tgt, store, cfg)?;
    Ok(Forward {
        src: pyr_src,
        tgt: pyr_tgt,
        src_skeleton: skel_src,
        tgt_skeleton: skel_tgt,
        src_features: f_src,
        tgt_features: f_tgt,
    })
}

/// Wall-clock milliseconds of each registration stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTiming {
    pub preprocess: f64,
    pub features: f64,
    pub coarse: f64,
    pub denoise: f64,
    pub dense: f64,
    pub estimate: f64,
}

impl StageTiming {
    pub fn total(&self) -> f64 {
        self.preprocess + self.features + self.coarse + self.denoise + self.dense + self.estimate
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Superpoint matches before resampling.
    pub coarse: CorrespondenceSet,
    /// Raw skeletal matches.
    pub skeletal: CorrespondenceSet,
    /// Skeletal matches kept by spectral denoising.
    pub denoised: CorrespondenceSet,
    /// Coarse set after swapping in skeletal matches.
    pub hybrid: CorrespondenceSet,
    pub dense: CorrespondenceSet,
    pub timing: StageTiming,
    /// Set when local-to-global registration failed and a fallback was used.
    pub fallback: bool,
    pub src_superpoints: PointCloud,
    pub tgt_superpoints: PointCloud,
    pub src_skeleton: PointCloud,
    pub tgt_skeleton: PointCloud,
    pub src_dense: PointCloud,
    pub tgt_dense: PointCloud,
}

impl RegistrationResult {
    /// Coordinates of both ends of `c`, resolved by its kind.
    pub fn endpoints(&self, c: &Correspondence) -> (Point3<f64>, Point3<f64>) {
        let (s, t) = match c.kind {
            CorrespondenceKind::Superpoint => (&self.src_superpoints, &self.tgt_superpoints),
            CorrespondenceKind::Skeletal => (&self.src_skeleton, &self.tgt_skeleton),
            CorrespondenceKind::Dense => (&self.src_dense, &self.tgt_dense),
        };
        (s.point(c.src), t.point(c.tgt))
    }

    /// Fraction of `set` whose source end, moved by `gt`, lands within
    /// `radius` of its target end. Zero for an empty set.
    pub fn inlier_ratio(&self, set: &CorrespondenceSet, gt: &RigidTransform, radius: f64) -> f64 {
        if set.is_empty() {
            return 0.0;
        }
        let hits = set
            .iter()
            .filter(|c| {
                let (p, q) = self.endpoints(c);
                (gt.apply(&p) - q).norm() < radius
            })
            .count();
        hits as f64 / set.len() as f64
    }
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Estimates the transform mapping `src` onto `tgt`.
pub fn register(src: &PointCloud, tgt: &PointCloud, store: &ParameterStore, cfg: &Config) -> Result<RegistrationResult> {
    let mut timing = StageTiming::default();
    let clock = Instant::now();
    let src = preprocess(src, cfg)?;
    let tgt = preprocess(tgt, cfg)?;
    timing.preprocess = millis(clock);

    let clock = Instant::now();
    let tape = Tape::new();
    let fw = forward(&tape, &src, &tgt, store, cfg)?;
    timing.features = millis(clock);

    let clock = Instant::now();
    let h_src = fw.src_features.superpoints.value();
    let h_tgt = fw.tgt_features.superpoints.value();
    let coarse = coarse_match(&h_src, &h_tgt, cfg.coarse_cap, CorrespondenceKind::Superpoint);
    let skeletal = coarse_match(
        &fw.src_features.skeleton.value(),
        &fw.tgt_features.skeleton.value(),
        cfg.coarse_cap,
        CorrespondenceKind::Skeletal,
    );
    timing.coarse = millis(clock);

    let clock = Instant::now();
    let src_skeleton = fw.src_skeleton.point_cloud();
    let tgt_skeleton = fw.tgt_skeleton.point_cloud();
    let compat = build_compatibility(&skeletal, &src_skeleton, &tgt_skeleton, cfg.sigma_c);
    let denoised = spectral_denoise(&skeletal, &compat, cfg.min_cluster, cfg.tau_conflict, cfg.conflict_rule);
    let hybrid = hybrid_resample(&coarse, &denoised, cfg.replace_count, cfg.skeletal_top);
    timing.denoise = millis(clock);

    let clock = Instant::now();
    let slack = store
        .get(SLACK_PARAM)
        .ok_or_else(|| Error::Parameter(format!("missing parameter {SLACK_PARAM}")))?
        .item();
    let dense = dense_match(
        &fw.src.dense_features().value(),
        &fw.tgt.dense_features().value(),
        &fw.src.patches,
        &fw.tgt.patches,
        &hybrid,
        slack,
        cfg,
    )?;
    timing.dense = millis(clock);

    let mut result = RegistrationResult {
        transform: RigidTransform::identity(),
        coarse,
        skeletal,
        denoised,
        hybrid,
        dense,
        timing,
        fallback: false,
        src_superpoints: fw.src.superpoints().clone(),
        tgt_superpoints: fw.tgt.superpoints().clone(),
        src_skeleton,
        tgt_skeleton,
        src_dense: fw.src.dense_points().clone(),
        tgt_dense: fw.tgt.dense_points().clone(),
    };

    let clock = Instant::now();
    let mut matches: Vec<PointMatch> = result
        .dense
        .iter()
        .map(|c| {
            let (src, tgt) = result.endpoints(c);
            PointMatch {
                src,
                tgt,
                weight: c.score,
                group: c.group,
            }
        })
        .collect();
    matches.extend(result.hybrid.of_kind(CorrespondenceKind::Skeletal).iter().map(|c| {
        let (src, tgt) = result.endpoints(c);
        PointMatch {
            src,
            tgt,
            weight: c.score,
            group: None,
        }
    }));
    match local_to_global(&matches, cfg.tau_a, cfg.lgr_refine) {
        Ok(lgr) => result.transform = lgr.transform,
        Err(_) => {
            result.fallback = true;
            let (p, q): (Vec<_>, Vec<_>) = result.hybrid.iter().map(|c| result.endpoints(c)).unzip();
            let w: Vec<f64> = result.hybrid.iter().map(|c| c.score).collect();
            if let Ok(t) = weighted_procrustes(&p, &q, &w) {
                result.transform = t;
            }
        }
    }
    result.timing.estimate = millis(clock);
    Ok(result)
}
