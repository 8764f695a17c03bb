use std::collections::HashMap;

use super::coarse::{Correspondence, CorrespondenceKind, CorrespondenceSet};
use crate::backbone::Patches;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Log-domain Sinkhorn over `scores` (`m×n`) augmented with a slack row and
/// column filled with the scalar `slack`.
///
/// Marginals are `1` for every real row and column and `n` (resp. `m`) for the
/// slack column (row), all divided by `m + n`. The result is the
/// `(m+1)×(n+1)` log-assignment, rescaled so that real rows sum to one.
pub fn log_sinkhorn<'t>(scores: Var<'t>, slack: Var<'t>, iterations: usize) -> Result<Var<'t>> {
    let tape = scores.tape();
    let (m, n) = (scores.rows(), scores.cols());
    if slack.shape() != [1, 1] {
        return Err(Error::Shape(format!("slack must be 1×1, got {:?}", slack.shape())));
    }
    let col = slack.add(tape.constant(Tensor::zeros(m, 1)))?;
    let row = slack.add(tape.constant(Tensor::zeros(1, n + 1)))?;
    let z = Var::concat_rows(&[Var::concat_cols(&[scores, col])?, row])?;

    let norm = -((m + n) as f64).ln();
    let mut log_mu = vec![norm; m + 1];
    log_mu[m] = (n as f64).ln() + norm;
    let mut log_nu = vec![norm; n + 1];
    log_nu[n] = (m as f64).ln() + norm;
    let log_mu = tape.constant(Tensor::new(m + 1, 1, log_mu)?);
    let log_nu = tape.constant(Tensor::new(1, n + 1, log_nu)?);

    let mut u = tape.constant(Tensor::zeros(m + 1, 1));
    let mut v = tape.constant(Tensor::zeros(1, n + 1));
    for _ in 0..iterations {
        u = log_mu.sub(z.add(v)?.logsumexp_rows())?;
        v = log_nu.sub(z.add(u)?.logsumexp_cols())?;
    }
    Ok(z.add(u)?.add(v)?.add_scalar(-norm))
}

/// Mutual top-`k` entries of the real block of `probs` (`(m+1)×(n+1)`)
/// whose probability exceeds `threshold`.
pub fn mutual_topk(probs: &Tensor, k: usize, threshold: f64) -> Vec<(usize, usize, f64)> {
    let (m, n) = (probs.rows() - 1, probs.cols() - 1);
    let top = |vals: Vec<(usize, f64)>| -> Vec<usize> {
        let mut v = vals;
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().take(k).map(|(i, _)| i).collect()
    };
    let row_top: Vec<Vec<usize>> = (0..m).map(|a| top((0..n).map(|b| (b, probs.get(a, b))).collect())).collect();
    let col_top: Vec<Vec<usize>> = (0..n).map(|b| top((0..m).map(|a| (a, probs.get(a, b))).collect())).collect();
    let mut out = Vec::new();
    for a in 0..m {
        for b in 0..n {
            let p = probs.get(a, b);
            if p > threshold && row_top[a].contains(&b) && col_top[b].contains(&a) {
                out.push((a, b, p));
            }
        }
    }
    out
}

/// Patch-level Sinkhorn matching for every superpoint pair of `coarse`.
///
/// Other kinds of coarse pairs are skipped. Duplicate dense pairs keep their
/// highest score; the survivor records the coarse pair it came from in `group`.
#[allow(clippy::too_many_arguments)]
pub fn dense_match(
    src_features: &Tensor,
    tgt_features: &Tensor,
    src_patches: &Patches,
    tgt_patches: &Patches,
    coarse: &CorrespondenceSet,
    slack: f64,
    cfg: &Config,
) -> Result<CorrespondenceSet> {
    let scale = 1.0 / (src_features.cols() as f64).sqrt();
    let mut out: Vec<Correspondence> = Vec::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    for (g, c) in coarse.iter().enumerate() {
        if c.kind != CorrespondenceKind::Superpoint {
            continue;
        }
        let (ps, qs) = (&src_patches.members[c.src], &tgt_patches.members[c.tgt]);
        if ps.is_empty() || qs.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let f = tape.constant(rows_of(src_features, ps));
        let h = tape.constant(rows_of(tgt_features, qs));
        let scores = f.matmul(h.transpose())?.scale(scale);
        let log_p = log_sinkhorn(scores, tape.constant(Tensor::scalar(slack)), cfg.sinkhorn_iters)?;
        let probs = log_p.value().map(f64::exp);
        for (a, b, p) in mutual_topk(&probs, cfg.mutual_topk, cfg.tau_m) {
            let key = (ps[a], qs[b]);
            let corr = Correspondence {
                src: ps[a],
                tgt: qs[b],
                score: p,
                kind: CorrespondenceKind::Dense,
                group: Some(g),
            };
            match seen.get(&key) {
                Some(&i) if out[i].score >= p => {}
                Some(&i) => out[i] = corr,
                None => {
                    seen.insert(key, out.len());
                    out.push(corr);
                }
            }
        }
    }
    Ok(CorrespondenceSet(out))
}

pub(crate) fn rows_of(t: &Tensor, rows: &[usize]) -> Tensor {
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Tensor::new(rows.len(), t.cols(), data).expect("row selection")
}
