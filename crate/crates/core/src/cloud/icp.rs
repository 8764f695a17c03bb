use nalgebra::Point3;

use super::{PointCloud, RigidTransform, SpatialIndex};
use crate::error::{Error, Result};
use crate::matching::weighted_procrustes;

/// Point-to-point ICP settings.
#[derive(Debug, Clone, Copy)]
pub struct IcpOptions {
    pub max_iters: usize,
    /// Correspondences farther than this (meters) are ignored.
    pub max_corr_dist: f64,
    /// Stop once the relative change of the mean residual drops below this.
    pub rel_tolerance: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            max_corr_dist: 1.0,
            rel_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Mean closest-point residual of each accepted iterate, starting with `init`.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Set when no correspondence fell inside `max_corr_dist`.
    pub no_progress: bool,
}

/// Mean residual of the correspondences within `max_dist`, plus the pairs.
fn correspond(
    index: &SpatialIndex,
    source: &[Point3<f64>],
    t: &RigidTransform,
    max_dist: f64,
) -> (f64, Vec<Point3<f64>>, Vec<Point3<f64>>) {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut total = 0.0;
    for p in source {
        let moved = t.apply(p);
        if let Some(n) = index.nearest(&moved) {
            if n.distance <= max_dist {
                total += n.distance;
                src.push(*p);
                tgt.push(index.points()[n.index]);
            }
        }
    }
    let mean = if src.is_empty() { f64::INFINITY } else { total / src.len() as f64 };
    (mean, src, tgt)
}

/// Refines `init` so that `source` aligns with `target`.
///
/// An update is accepted only if it does not increase the mean residual, so
/// the recorded residual sequence is non-increasing.
pub fn icp_refine(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    opts: &IcpOptions,
) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Parameter("ICP needs two non-empty clouds".into()));
    }
    let index = SpatialIndex::new(target);
    let mut current = *init;
    let (mut residual, mut src, mut tgt) = correspond(&index, source.points(), &current, opts.max_corr_dist);
    if src.is_empty() {
        return Ok(IcpResult {
            transform: *init,
            residuals: Vec::new(),
            iterations: 0,
            no_progress: true,
        });
    }
    let mut residuals = vec![residual];
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        if residual == 0.0 {
            break;
        }
        let weights = vec![1.0; src.len()];
        let candidate = match weighted_procrustes(&src, &tgt, &weights) {
            Ok(t) => t,
            Err(Error::DegenerateGeometry(_)) => break,
            Err(e) => return Err(e),
        };
        let (next, next_src, next_tgt) = correspond(&index, source.points(), &candidate, opts.max_corr_dist);
        if next_src.is_empty() || next > residual {
            break;
        }
        let rel = (residual - next) / residual.max(f64::MIN_POSITIVE);
        current = candidate;
        residual = next;
        src = next_src;
        tgt = next_tgt;
        residuals.push(residual);
        if rel < opts.rel_tolerance {
            break;
        }
    }
    Ok(IcpResult {
        transform: current,
        residuals,
        iterations,
        no_progress: false,
    })
}
