use std::collections::BTreeMap;

use nalgebra::Point3;

use super::procrustes::weighted_procrustes;
use crate::cloud::RigidTransform;
use crate::error::{Error, Result};

/// A weighted coordinate pair fed to [`local_to_global`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMatch {
    pub src: Point3<f64>,
    pub tgt: Point3<f64>,
    pub weight: f64,
    /// Patch the match belongs to; `None` for matches that form no patch.
    pub group: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LgrResult {
    pub transform: RigidTransform,
    /// Inlier count after each accepted step, starting with the chosen candidate.
    pub inlier_history: Vec<usize>,
    /// Number of patch candidates that were solved.
    pub candidates: usize,
    /// Set when no patch had three matches and the global solve was used.
    pub fallback: bool,
}

impl LgrResult {
    pub fn inliers(&self) -> usize {
        *self.inlier_history.last().unwrap_or(&0)
    }
}

fn inlier_mask(matches: &[PointMatch], t: &RigidTransform, radius: f64) -> Vec<bool> {
    matches.iter().map(|m| (t.apply(&m.src) - m.tgt).norm() < radius).collect()
}

fn solve(matches: &[PointMatch], pick: impl Fn(usize) -> bool) -> Result<RigidTransform> {
    let (mut src, mut tgt, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for (i, m) in matches.iter().enumerate() {
        if pick(i) {
            src.push(m.src);
            tgt.push(m.tgt);
            w.push(m.weight);
        }
    }
    weighted_procrustes(&src, &tgt, &w)
}

/// Local-to-global registration.
///
/// Every group with at least three matches yields a candidate transform;
/// the candidate with the most inliers over all matches (residual below
/// `inlier_radius`) wins, lower group id on ties. It is then re-solved on
/// its inliers `refinements` times, keeping a step only if the inlier count
/// does not drop.
pub fn local_to_global(matches: &[PointMatch], inlier_radius: f64, refinements: usize) -> Result<LgrResult> {
    if matches.is_empty() {
        return Err(Error::DegenerateInput("no correspondences for registration".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, m) in matches.iter().enumerate() {
        if let Some(g) = m.group {
            groups.entry(g).or_default().push(i);
        }
    }
    let mut best: Option<(usize, RigidTransform)> = None;
    let mut candidates = 0;
    for members in groups.values().filter(|m| m.len() >= 3) {
        let sub: Vec<PointMatch> = members.iter().map(|&i| matches[i]).collect();
        let Ok(t) = solve(&sub, |_| true) else { continue };
        candidates += 1;
        let count = inlier_mask(matches, &t, inlier_radius).iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, t));
        }
    }
    let fallback = best.is_none();
    let (mut count, mut current) = match best {
        Some(b) => b,
        None => {
            let t = solve(matches, |_| true)?;
            (inlier_mask(matches, &t, inlier_radius).iter().filter(|&&b| b).count(), t)
        }
    };
    let mut inlier_history = vec![count];
    for _ in 0..refinements {
        let mask = inlier_mask(matches, &current, inlier_radius);
        let Ok(next) = solve(matches, |i| mask[i]) else { break };
        let next_count = inlier_mask(matches, &next, inlier_radius).iter().filter(|&&b| b).count();
        if next_count < count {
            break;
        }
        current = next;
        count = next_count;
        inlier_history.push(count);
    }
    Ok(LgrResult {
        transform: current,
        inlier_history,
        candidates,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn exact_matches_recover_transform() {
        let t = RigidTransform::from_euler(0.1, -0.2, 1.3, Vector3::new(1.0, 2.0, -0.5));
        let matches: Vec<_> = (0..30)
            .map(|i| {
                let p = Point3::new((i as f64 * 0.7).sin() * 5.0, (i as f64 * 1.3).cos() * 4.0, i as f64 * 0.1);
                PointMatch {
                    src: p,
                    tgt: t.apply(&p),
                    weight: 1.0,
                    group: Some(i / 5),
                }
            })
            .collect();
        let out = local_to_global(&matches, 0.6, 5).unwrap();
        assert_eq!(out.inliers(), 30);
        assert!((out.transform.rotation - t.rotation).amax() < 1e-9);
        assert!((out.transform.translation - t.translation).amax() < 1e-9);
        assert!(out.inlier_history.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn ungrouped_matches_use_global_solve() {
        let matches: Vec<_> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
            .iter()
            .map(|p| PointMatch {
                src: Point3::from(*p),
                tgt: Point3::from(*p) + Vector3::new(0.5, 0.0, 0.0),
                weight: 1.0,
                group: None,
            })
            .collect();
        let out = local_to_global(&matches, 0.6, 5).unwrap();
        assert!(out.fallback);
        assert!((out.transform.translation - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        assert!(local_to_global(&[], 0.6, 5).is_err());
    }
}
