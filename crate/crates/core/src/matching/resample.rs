use super::coarse::CorrespondenceSet;

/// Replaces the `replace` weakest entries of `coarse` with the `top` strongest
/// entries of `skeletal`. Survivors keep their order; among equal scores the
/// later entry is dropped first.
pub fn hybrid_resample(
    coarse: &CorrespondenceSet,
    skeletal: &CorrespondenceSet,
    replace: usize,
    top: usize,
) -> CorrespondenceSet {
    let mut by_score: Vec<usize> = (0..coarse.len()).collect();
    by_score.sort_by(|&a, &b| coarse[a].score.total_cmp(&coarse[b].score).then(b.cmp(&a)));
    let mut dropped = vec![false; coarse.len()];
    for &i in by_score.iter().take(replace) {
        dropped[i] = true;
    }
    let mut out: Vec<_> = coarse
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(c, _)| *c)
        .collect();
    let mut best: Vec<usize> = (0..skeletal.len()).collect();
    best.sort_by(|&a, &b| skeletal[b].score.total_cmp(&skeletal[a].score).then(a.cmp(&b)));
    out.extend(best.into_iter().take(top).map(|i| skeletal[i]));
    CorrespondenceSet(out)
}
