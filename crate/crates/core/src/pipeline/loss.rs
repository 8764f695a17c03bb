use nalgebra::Point3;

use crate::backbone::FeaturePyramid;
use crate::cloud::{PointCloud, RigidTransform};
use crate::config::Config;
use crate::error::Result;
use crate::tensor::{Tensor, Var};

/// Fraction of each source patch's dense points that have a ground-truth
/// aligned counterpart within `radius` in each target patch (`n×m`).
pub fn patch_overlaps(src: &FeaturePyramid<'_>, tgt: &FeaturePyramid<'_>, gt: &RigidTransform, radius: f64) -> Tensor {
    let (sp, tp) = (src.superpoints(), tgt.superpoints());
    let src_dense: Vec<Point3<f64>> = src.dense_points().points().iter().map(|p| gt.apply(p)).collect();
    let tgt_dense = tgt.dense_points().points();
    let src_centres: Vec<Point3<f64>> = sp.points().iter().map(|p| gt.apply(p)).collect();
    let reach = |centres: &[Point3<f64>], pts: &[Point3<f64>], members: &[Vec<usize>]| -> Vec<f64> {
        members
            .iter()
            .enumerate()
            .map(|(i, m)| m.iter().map(|&a| (pts[a] - centres[i]).norm()).fold(0.0, f64::max))
            .collect()
    };
    let src_reach = reach(&src_centres, &src_dense, &src.patches.members);
    let tgt_reach = reach(tp.points(), tgt_dense, &tgt.patches.members);
    let (n, m) = (sp.len(), tp.len());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let pi = &src.patches.members[i];
        if pi.is_empty() {
            continue;
        }
        for j in 0..m {
            let qj = &tgt.patches.members[j];
            if qj.is_empty() || (src_centres[i] - tp.point(j)).norm() > src_reach[i] + tgt_reach[j] + radius {
                continue;
            }
            let hits = pi
                .iter()
                .filter(|&&a| qj.iter().any(|&b| (src_dense[a] - tgt_dense[b]).norm() < radius))
                .count();
            out.set(i, j, hits as f64 / pi.len() as f64);
        }
    }
    out
}

/// Ground-truth dense matches between source patch `ps` and target patch `qs`
/// as a boolean `|ps|×|qs|` mask.
pub fn patch_gt_matches(
    src_dense: &PointCloud,
    tgt_dense: &PointCloud,
    ps: &[usize],
    qs: &[usize],
    gt: &RigidTransform,
    radius: f64,
) -> Vec<bool> {
    let mut mask = Vec::with_capacity(ps.len() * qs.len());
    for &a in ps {
        let pa = gt.apply(&src_dense.point(a));
        for &b in qs {
            mask.push((pa - tgt_dense.point(b)).norm() < radius);
        }
    }
    mask
}

/// Overlap-aware circle loss between superpoint features.
///
/// Pairs with overlap above `overlap_floor` are positives, pairs with zero
/// overlap negatives. Each anchor (a row or column with a positive) costs
/// `softplus(LSE_pos(β·√o·[d − Δp]₊²) + LSE_neg(β·[Δn − d]₊²)) / β` over
/// L2-normalised feature distances `d`, with an empty log-sum-exp taken as 0.
/// With `circle_adaptive` off the logits are `β·√o·(d − Δp)` and `β·(Δn − d)`
/// and the scale is not divided out. The result is the mean of the row and
/// column anchor means; zero without anchors.
pub fn overlap_circle_loss<'t>(h_p: Var<'t>, h_q: Var<'t>, overlaps: &Tensor, cfg: &Config) -> Result<Var<'t>> {
    let tape = h_p.tape();
    let (n, m) = (overlaps.rows(), overlaps.cols());
    let d = h_p.l2_normalize_rows().pairwise_distances(h_q.l2_normalize_rows())?;
    let pos: Vec<bool> = overlaps.data().iter().map(|&o| o > cfg.overlap_floor).collect();
    let neg: Vec<bool> = overlaps.data().iter().map(|&o| o == 0.0).collect();
    let lambda = tape.constant(overlaps.map(|o| if o > cfg.overlap_floor { o.sqrt() } else { 0.0 }));
    let beta = cfg.circle_scale;
    let pos_gap = d.add_scalar(-cfg.circle_pos_margin);
    let neg_gap = d.neg().add_scalar(cfg.circle_neg_margin);
    let (pos_logits, neg_logits, norm) = if cfg.circle_adaptive {
        // Each logit carries its own hinge as a weight, so pairs past their
        // margin stop contributing and pulling every feature together is
        // penalised through the negatives.
        let (pos_gap, neg_gap) = (pos_gap.relu(), neg_gap.relu());
        (pos_gap.square(), neg_gap.square(), 1.0 / beta)
    } else {
        (pos_gap, neg_gap, 1.0)
    };
    let pos_logits = pos_logits.mul(lambda)?.scale(beta);
    let neg_logits = neg_logits.scale(beta);

    let row_anchors: Vec<usize> = (0..n).filter(|&i| (0..m).any(|j| pos[i * m + j])).collect();
    let col_anchors: Vec<usize> = (0..m).filter(|&j| (0..n).any(|i| pos[i * m + j])).collect();
    if row_anchors.is_empty() && col_anchors.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let transpose_mask = |mask: &[bool]| -> Vec<bool> { (0..m * n).map(|k| mask[(k % n) * m + k / n]).collect() };
    let row_terms = pos_logits
        .masked_logsumexp_rows(&pos)?
        .add(neg_logits.masked_logsumexp_rows(&neg)?)?
        .softplus()
        .gather_rows(&row_anchors)?
        .mean();
    let col_terms = pos_logits
        .transpose()
        .masked_logsumexp_rows(&transpose_mask(&pos))?
        .add(neg_logits.transpose().masked_logsumexp_rows(&transpose_mask(&neg))?)?
        .softplus()
        .gather_rows(&col_anchors)?
        .mean();
    Ok(row_terms.add(col_terms)?.scale(0.5 * norm))
}

/// Negative log-likelihood of a slack-augmented log-assignment (`(m+1)×(n+1)`)
/// at the ground-truth matches (`gt`, `m×n`), with unmatched rows assigned to
/// the slack column and unmatched columns to the slack row.
pub fn point_matching_loss<'t>(log_assignment: Var<'t>, gt: &[bool]) -> Result<Var<'t>> {
    let (m, n) = (log_assignment.rows() - 1, log_assignment.cols() - 1);
    let mut positions = Vec::new();
    for a in 0..m {
        let mut any = false;
        for b in 0..n {
            if gt[a * n + b] {
                positions.push((a, b));
                any = true;
            }
        }
        if !any {
            positions.push((a, n));
        }
    }
    for b in 0..n {
        if !(0..m).any(|a| gt[a * n + b]) {
            positions.push((m, b));
        }
    }
    Ok(log_assignment.gather_elements(&positions)?.mean().neg())
}
