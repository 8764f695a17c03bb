use std::fmt;
use std::io::Write;
use std::ops::Deref;

use nalgebra::Point3;

use crate::error::Result;
use crate::fmt::sig6;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorrespondenceKind {
    Superpoint,
    Skeletal,
    Dense,
}

impl fmt::Display for CorrespondenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorrespondenceKind::Superpoint => "superpoint",
            CorrespondenceKind::Skeletal => "skeletal",
            CorrespondenceKind::Dense => "dense",
        })
    }
}

/// One scored index pair. Indices refer to the point set of its kind:
/// superpoints, skeleton points or dense points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src: usize,
    pub tgt: usize,
    pub score: f64,
    pub kind: CorrespondenceKind,
    /// For dense pairs, the position of the coarse pair that produced it.
    pub group: Option<usize>,
}

impl Correspondence {
    pub fn new(src: usize, tgt: usize, score: f64, kind: CorrespondenceKind) -> Self {
        Self {
            src,
            tgt,
            score,
            kind,
            group: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet(pub Vec<Correspondence>);

impl Deref for CorrespondenceSet {
    type Target = [Correspondence];
    fn deref(&self) -> &[Correspondence] {
        &self.0
    }
}

impl FromIterator<Correspondence> for CorrespondenceSet {
    fn from_iter<I: IntoIterator<Item = Correspondence>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl CorrespondenceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_vec(self) -> Vec<Correspondence> {
        self.0
    }

    pub fn of_kind(&self, kind: CorrespondenceKind) -> CorrespondenceSet {
        self.iter().filter(|c| c.kind == kind).copied().collect()
    }
}

fn normalize_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let cols = t.cols();
    for r in 0..t.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// The dual-normalised Gaussian correlation `S′ = rowsoftmax(S) ∘ colsoftmax(S)`
/// with `S_ij = exp(−‖f_i − g_j‖²)` over L2-normalised rows.
pub fn dual_normalized_scores(f_src: &Tensor, f_tgt: &Tensor) -> Tensor {
    let (f, g) = (normalize_rows(f_src), normalize_rows(f_tgt));
    let (n, m) = (f.rows(), g.rows());
    let mut s = Tensor::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let d2: f64 = f.row(i).iter().zip(g.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            s.set(i, j, (-d2).exp());
        }
    }
    // Entries of S lie in [e⁻⁴, 1], so the softmaxes need no max shift.
    let e = s.map(f64::exp);
    let row_sums: Vec<f64> = (0..n).map(|i| e.row(i).iter().sum()).collect();
    let mut col_sums = vec![0.0; m];
    for i in 0..n {
        for (c, v) in col_sums.iter_mut().zip(e.row(i)) {
            *c += v;
        }
    }
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let v = e.get(i, j);
            out.set(i, j, (v / row_sums[i]) * (v / col_sums[j]));
        }
    }
    out
}

/// The `cap` largest entries of [`dual_normalized_scores`], ties in row-major order.
pub fn coarse_match(f_src: &Tensor, f_tgt: &Tensor, cap: usize, kind: CorrespondenceKind) -> CorrespondenceSet {
    let s = dual_normalized_scores(f_src, f_tgt);
    let m = s.cols();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.data()[b].total_cmp(&s.data()[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(cap)
        .map(|k| Correspondence::new(k / m, k % m, s.data()[k], kind))
        .collect()
}

/// Row of the correspondence dump.
pub struct CorrespondenceRow {
    pub kind: CorrespondenceKind,
    pub src: Point3<f64>,
    pub tgt: Point3<f64>,
    pub score: f64,
    /// `None` when no ground truth is known.
    pub inlier: Option<bool>,
}

/// Writes the correspondence CSV: header plus one row per pair, LF endings.
pub fn write_correspondence_csv(w: &mut impl Write, rows: &[CorrespondenceRow]) -> Result<()> {
    writeln!(w, "kind,src_x,src_y,src_z,tgt_x,tgt_y,tgt_z,score,is_inlier_under_gt")?;
    for r in rows {
        let inlier = match r.inlier {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.kind,
            sig6(r.src.x),
            sig6(r.src.y),
            sig6(r.src.z),
            sig6(r.tgt.x),
            sig6(r.tgt.y),
            sig6(r.tgt.z),
            sig6(r.score),
            inlier
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_features_match_diagonal() {
        let f = Tensor::eye(4);
        let c = coarse_match(&f, &f, 4, CorrespondenceKind::Superpoint);
        let mut pairs: Vec<_> = c.iter().map(|c| (c.src, c.tgt)).collect();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(c.iter().all(|c| c.score > 0.0));
    }

    #[test]
    fn constant_features_fall_back_to_index_order() {
        let f = Tensor::full(3, 2, 1.0);
        let c = coarse_match(&f, &f, 4, CorrespondenceKind::Skeletal);
        let pairs: Vec<_> = c.iter().map(|c| (c.src, c.tgt)).collect();
        assert_eq!(pairs, vec![(0, 0), (0, 1), (0, 2), (1, 0)]);
        assert!(c.iter().all(|c| (c.score - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn csv_layout() {
        let rows = [CorrespondenceRow {
            kind: CorrespondenceKind::Dense,
            src: Point3::new(1.0, 0.5, -2.0),
            tgt: Point3::new(1.0 / 3.0, 0.0, 1e7),
            score: 0.25,
            inlier: Some(true),
        }];
        let mut out = Vec::new();
        write_correspondence_csv(&mut out, &rows).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "kind,src_x,src_y,src_z,tgt_x,tgt_y,tgt_z,score,is_inlier_under_gt\n\
             dense,1,0.5,-2,0.333333,0,1e+07,0.25,1\n"
        );
    }
}
