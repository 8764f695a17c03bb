use nalgebra::Point3;

use super::coarse::{Correspondence, CorrespondenceSet};
use crate::cloud::PointCloud;
use crate::config::ConflictRule;

/// Symmetric pairwise compatibility of correspondences, zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CompatibilityMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.n + b]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sum of `M_ab` over unordered pairs within `subset`.
    pub fn total(&self, subset: &[usize]) -> f64 {
        let mut s = 0.0;
        for (i, &a) in subset.iter().enumerate() {
            for &b in &subset[i + 1..] {
                s += self.get(a, b);
            }
        }
        s
    }
}

/// `M_ab = max(0, 1 − (δ_ab/σ)²)` with `δ_ab = |‖p_a − p_b‖ − ‖q_a − q_b‖|`
/// for matched coordinate lists `src[a] ↔ tgt[a]`.
pub fn compatibility_from_points(src: &[Point3<f64>], tgt: &[Point3<f64>], sigma: f64) -> CompatibilityMatrix {
    let n = src.len().min(tgt.len());
    let mut data = vec![0.0; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let delta = ((src[a] - src[b]).norm() - (tgt[a] - tgt[b]).norm()).abs();
            let m = (1.0 - (delta / sigma).powi(2)).max(0.0);
            data[a * n + b] = m;
            data[b * n + a] = m;
        }
    }
    CompatibilityMatrix { n, data }
}

/// Compatibility of `corr`, whose indices point into `src_pts` / `tgt_pts`.
pub fn build_compatibility(
    corr: &CorrespondenceSet,
    src_pts: &PointCloud,
    tgt_pts: &PointCloud,
    sigma_c: f64,
) -> CompatibilityMatrix {
    let src: Vec<_> = corr.iter().map(|c| src_pts.point(c.src)).collect();
    let tgt: Vec<_> = corr.iter().map(|c| tgt_pts.point(c.tgt)).collect();
    compatibility_from_points(&src, &tgt, sigma_c)
}

/// Principal eigenvector of the principal submatrix on `active`, by power
/// iteration from the uniform vector (100 iterations or relative change < 1e-9).
pub fn principal_eigenvector(m: &CompatibilityMatrix, active: &[usize]) -> Vec<f64> {
    let n = active.len();
    if n == 0 {
        return Vec::new();
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    for _ in 0..100 {
        let mut next: Vec<f64> = active
            .iter()
            .map(|&a| active.iter().zip(&v).map(|(&b, vb)| m.get(a, b) * vb).sum())
            .collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; n];
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let change = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if change < 1e-9 {
            break;
        }
    }
    v
}

fn conflicts(leader: &Correspondence, other: &Correspondence, compat: f64, rule: ConflictRule, tau: f64) -> bool {
    match rule {
        ConflictRule::Threshold => compat < tau,
        ConflictRule::OneToOne => leader.src == other.src || leader.tgt == other.tgt,
    }
}

/// Keeps the main cluster of mutually compatible correspondences.
///
/// Repeatedly accepts the not yet accepted entry with the largest
/// principal-eigenvector component and removes everything conflicting with
/// it, until the eigenvector vanishes on the unaccepted entries or only
/// `min_cluster` entries remain. A removal that would undershoot
/// `min_cluster` drops only the conflicting entries with the smallest
/// eigenvector components.
pub fn spectral_denoise(
    corr: &CorrespondenceSet,
    m: &CompatibilityMatrix,
    min_cluster: usize,
    tau_conflict: f64,
    rule: ConflictRule,
) -> CorrespondenceSet {
    if corr.len() < 2 || m.len() != corr.len() {
        return corr.clone();
    }
    let mut active: Vec<usize> = (0..corr.len()).collect();
    let mut accepted = vec![false; corr.len()];
    while active.len() > min_cluster {
        let v = principal_eigenvector(m, &active);
        let lead = (0..active.len())
            .filter(|&i| !accepted[active[i]])
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if v[b] >= v[i] => Some(b),
                _ => Some(i),
            });
        let Some(lead) = lead.filter(|&i| v[i].abs() >= 1e-9) else { break };
        let leader = active[lead];
        accepted[leader] = true;
        let mut doomed: Vec<usize> = (0..active.len())
            .filter(|&i| {
                i != lead && conflicts(&corr[leader], &corr[active[i]], m.get(leader, active[i]), rule, tau_conflict)
            })
            .collect();
        let budget = active.len() - min_cluster;
        if doomed.len() > budget {
            doomed.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a)));
            doomed.truncate(budget);
        }
        doomed.sort_unstable();
        let mut keep = Vec::with_capacity(active.len() - doomed.len());
        let mut d = doomed.iter().peekable();
        for (i, &a) in active.iter().enumerate() {
            if d.peek() == Some(&&i) {
                d.next();
            } else {
                keep.push(a);
            }
        }
        active = keep;
    }
    active.into_iter().map(|i| corr[i]).collect()
}
