use nalgebra::Point3;

use crate::cloud::{nearest_distances, PointCloud, RigidTransform, SpatialIndex};

/// Rotation error in degrees, `∈ [0, 180]`.
///
/// Computed from the angle of `R_gtᵀ R_est` via `atan2`, which equals the
/// usual `arccos((trace − 1)/2)` but stays accurate for tiny angles.
pub fn rotation_error_deg(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    crate::cloud::rotation_angle(&(gt.rotation.transpose() * est.rotation)).to_degrees()
}

/// Translation error, `‖t_est − t_gt‖`.
pub fn translation_error(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    (est.translation - gt.translation).norm()
}

/// Fraction of `(source, target)` pairs within `radius` after moving the
/// source by `gt`; zero for no pairs.
pub fn inlier_ratio(pairs: &[(Point3<f64>, Point3<f64>)], gt: &RigidTransform, radius: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs.iter().filter(|(p, q)| (gt.apply(p) - q).norm() < radius).count();
    hits as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub rre_deg: f64,
    pub rte: f64,
    pub inlier_ratio: f64,
    pub success: bool,
}

/// Errors of `est` against `gt` and the inlier ratio of `pairs` at `ir_radius`.
pub fn compute_metrics(
    est: &RigidTransform,
    gt: &RigidTransform,
    pairs: &[(Point3<f64>, Point3<f64>)],
    rre_threshold_deg: f64,
    rte_threshold: f64,
    ir_radius: f64,
) -> PairMetrics {
    let rre_deg = rotation_error_deg(est, gt);
    let rte = translation_error(est, gt);
    PairMetrics {
        rre_deg,
        rte,
        inlier_ratio: inlier_ratio(pairs, gt, ir_radius),
        success: rre_deg < rre_threshold_deg && rte < rte_threshold,
    }
}

/// Fraction of ground-truth-aligned source points whose nearest target point
/// is within `tau`. Zero when either cloud is empty.
pub fn overlap_ratio(src: &PointCloud, tgt: &PointCloud, gt: &RigidTransform, tau: f64) -> f64 {
    if src.is_empty() || tgt.is_empty() {
        return 0.0;
    }
    let index = SpatialIndex::new(tgt);
    let moved: Vec<Point3<f64>> = src.points().iter().map(|p| gt.apply(p)).collect();
    let near = nearest_distances(&index, &moved).into_iter().filter(|&d| d < tau).count();
    near as f64 / src.len() as f64
}
