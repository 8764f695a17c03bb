//! Differentiable operations on [`Var`].
//!
//! Binary elementwise ops broadcast along any axis of length 1.

use super::tape::Var;
use super::{gemm, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn broadcast_shape(op: &str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let mut out = [0; 2];
    for d in 0..2 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, a, b)),
        };
    }
    Ok(out)
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to(g: &Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for r in 0..g.rows() {
        let rr = if shape[0] == 1 { 0 } else { r };
        for c in 0..g.cols() {
            let cc = if shape[1] == 1 { 0 } else { c };
            out.data_mut()[rr * shape[1] + cc] += g.get(r, c);
        }
    }
    out
}

fn zip_broadcast(a: &Tensor, b: &Tensor, out_shape: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let [rows, cols] = out_shape;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ra = if a.rows() == 1 { 0 } else { r };
        let rb = if b.rows() == 1 { 0 } else { r };
        for c in 0..cols {
            let ca = if a.cols() == 1 { 0 } else { c };
            let cb = if b.cols() == 1 { 0 } else { c };
            out.push(f(a.get(ra, ca), b.get(rb, cb)));
        }
    }
    Tensor::from_vec(rows, cols, out)
}

fn unary<'t>(x: Var<'t>, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
    let value = x.value().map(f);
    x.tape.record(
        value,
        &[x],
        Box::new(move |g, p, y| {
            let d = p[0]
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::from_vec(g.rows(), g.cols(), d))]
        }),
    )
}

impl<'t> Var<'t> {
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.cols() != b.rows() {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let mut out = Tensor::zeros(a.rows(), b.cols());
        gemm(&a, false, &b, false, &mut out, 0.0);
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(|g, p, _| {
                let (a, b) = (p[0], p[1]);
                let mut da = Tensor::zeros(a.rows(), a.cols());
                gemm(g, false, b, true, &mut da, 0.0);
                let mut db = Tensor::zeros(b.rows(), b.cols());
                gemm(a, true, g, false, &mut db, 0.0);
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape("add", a.shape(), b.shape())?;
        let out = zip_broadcast(&a, &b, shape, |x, y| x + y);
        let (sa, sb) = (a.shape(), b.shape());
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |g, _, _| vec![Some(reduce_to(g, sa)), Some(reduce_to(g, sb))]),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape("sub", a.shape(), b.shape())?;
        let out = zip_broadcast(&a, &b, shape, |x, y| x - y);
        let (sa, sb) = (a.shape(), b.shape());
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |g, _, _| vec![Some(reduce_to(g, sa)), Some(reduce_to(&g.map(|v| -v), sb))]),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape("mul", a.shape(), b.shape())?;
        let out = zip_broadcast(&a, &b, shape, |x, y| x * y);
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0], p[1]);
                let ga = zip_broadcast(g, b, g.shape(), |x, y| x * y);
                let gb = zip_broadcast(g, a, g.shape(), |x, y| x * y);
                vec![Some(reduce_to(&ga, a.shape())), Some(reduce_to(&gb, b.shape()))]
            }),
        ))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        unary(self, move |x| x + s, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn log(self) -> Var<'t> {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    /// Square root; the gradient at 0 is taken as 0.
    pub fn sqrt(self) -> Var<'t> {
        unary(self, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(self) -> Var<'t> {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// `log(1 + eˣ)`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        unary(
            self,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn square(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose();
        self.tape
            .record(out, &[self], Box::new(|g, _, _| vec![Some(g.transpose())]))
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let s: f64 = x.data().iter().sum();
        let shape = x.shape();
        self.tape.record(
            Tensor::scalar(s),
            &[self],
            Box::new(move |g, _, _| vec![Some(Tensor::full(shape[0], shape[1], g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums: `n×d → n×1`.
    pub fn sum_rows(self) -> Var<'t> {
        let x = self.value();
        let out: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let cols = x.cols();
        self.tape.record(
            Tensor::from_vec(x.rows(), 1, out),
            &[self],
            Box::new(move |g, _, _| {
                let d = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
                vec![Some(Tensor::from_vec(g.rows(), cols, d))]
            }),
        )
    }

    /// Column sums: `n×d → 1×d`.
    pub fn sum_cols(self) -> Var<'t> {
        let x = self.value();
        let mut out = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let rows = x.rows();
        self.tape.record(
            Tensor::from_vec(1, x.cols(), out),
            &[self],
            Box::new(move |g, _, _| vec![Some(Tensor::from_vec(rows, g.cols(), g.data().repeat(rows)))]),
        )
    }

    pub fn row_softmax(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|v| v / s));
        }
        self.tape.record(
            Tensor::from_vec(rows, cols, out),
            &[self],
            Box::new(move |g, _, y| {
                let mut d = Vec::with_capacity(y.len());
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                vec![Some(Tensor::from_vec(rows, cols, d))]
            }),
        )
    }

    pub fn col_softmax(self) -> Var<'t> {
        self.transpose().row_softmax().transpose()
    }

    /// Row-wise `log Σ exp`: `n×m → n×1`.
    pub fn logsumexp_rows(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let out: Vec<f64> = (0..rows)
            .map(|r| {
                let row = x.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return m;
                }
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        self.tape.record(
            Tensor::from_vec(rows, 1, out),
            &[self],
            Box::new(move |g, p, y| {
                let x = p[0];
                let mut d = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let (lse, gv) = (y.get(r, 0), g.get(r, 0));
                    d.extend(x.row(r).iter().map(|v| {
                        if lse == f64::NEG_INFINITY {
                            0.0
                        } else {
                            gv * (v - lse).exp()
                        }
                    }));
                }
                vec![Some(Tensor::from_vec(rows, cols, d))]
            }),
        )
    }

    /// Column-wise `log Σ exp`: `n×m → 1×m`.
    pub fn logsumexp_cols(self) -> Var<'t> {
        self.transpose().logsumexp_rows().transpose()
    }

    /// Row-wise `log Σ exp` over the entries where `mask` is set. Rows with an
    /// empty mask evaluate to 0 and pass no gradient.
    pub fn masked_logsumexp_rows(self, mask: &[bool]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if mask.len() != rows * cols {
            return Err(Error::Shape(format!("mask of length {} for a {rows}×{cols} tensor", mask.len())));
        }
        let mask = mask.to_vec();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let m = (0..cols)
                .filter(|&c| mask[r * cols + c])
                .map(|c| x.get(r, c))
                .fold(f64::NEG_INFINITY, f64::max);
            if m > f64::NEG_INFINITY {
                let s: f64 = (0..cols)
                    .filter(|&c| mask[r * cols + c])
                    .map(|c| (x.get(r, c) - m).exp())
                    .sum();
                out[r] = m + s.ln();
            }
        }
        Ok(self.tape.record(
            Tensor::from_vec(rows, 1, out),
            &[self],
            Box::new(move |g, p, y| {
                let x = p[0];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        if mask[r * cols + c] {
                            d[r * cols + c] = g.get(r, 0) * (x.get(r, c) - y.get(r, 0)).exp();
                        }
                    }
                }
                vec![Some(Tensor::from_vec(rows, cols, d))]
            }),
        ))
    }

    /// Normalises each row to zero mean and unit variance (ε = 1e-5), no affine part.
    pub fn layer_norm(self) -> Var<'t> {
        const EPS: f64 = 1e-5;
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|v| (v - mean) * is));
        }
        self.tape.record(
            Tensor::from_vec(rows, cols, out),
            &[self],
            Box::new(move |g, _, y| {
                let n = cols as f64;
                let mut d = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| inv_std[r] * (gv - mg - yv * mgy)));
                }
                vec![Some(Tensor::from_vec(rows, cols, d))]
            }),
        )
    }

    /// Divides each row by its Euclidean norm (rows of norm 0 stay 0).
    pub fn l2_normalize_rows(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let norms: Vec<f64> = (0..rows).map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let inv = if norms[r] > 0.0 { 1.0 / norms[r] } else { 0.0 };
            out.extend(x.row(r).iter().map(|v| v * inv));
        }
        self.tape.record(
            Tensor::from_vec(rows, cols, out),
            &[self],
            Box::new(move |g, _, y| {
                let mut d = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    if norms[r] == 0.0 {
                        d.extend(std::iter::repeat_n(0.0, cols));
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / norms[r]));
                }
                vec![Some(Tensor::from_vec(rows, cols, d))]
            }),
        )
    }

    /// Stacks tensors vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let cols = first.cols();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        if let Some(v) = values.iter().find(|v| v.cols() != cols) {
            return Err(shape_err("concat_rows", first.shape(), v.shape()));
        }
        let row_counts: Vec<usize> = values.iter().map(|v| v.rows()).collect();
        let data: Vec<f64> = values.iter().flat_map(|v| v.data().iter().copied()).collect();
        let rows = row_counts.iter().sum();
        Ok(first.tape.record(
            Tensor::from_vec(rows, cols, data),
            parts,
            Box::new(move |g, _, _| {
                let mut start = 0;
                row_counts
                    .iter()
                    .map(|&n| {
                        let t = Tensor::from_vec(n, cols, g.data()[start * cols..(start + n) * cols].to_vec());
                        start += n;
                        Some(t)
                    })
                    .collect()
            }),
        ))
    }

    /// Places tensors side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let rows = first.rows();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        if let Some(v) = values.iter().find(|v| v.rows() != rows) {
            return Err(shape_err("concat_cols", first.shape(), v.shape()));
        }
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        Ok(first.tape.record(
            Tensor::from_vec(rows, total, data),
            parts,
            Box::new(move |g, _, _| {
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        Some(Tensor::from_vec(rows, w, d))
                    })
                    .collect()
            }),
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if start > end || end > x.cols() {
            return Err(Error::Shape(format!("column slice {start}..{end} of {:?}", x.shape())));
        }
        let (rows, cols, w) = (x.rows(), x.cols(), end - start);
        let data: Vec<f64> = (0..rows).flat_map(|r| x.row(r)[start..end].to_vec()).collect();
        Ok(self.tape.record(
            Tensor::from_vec(rows, w, data),
            &[self],
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    d.data_mut()[r * cols + start..r * cols + end].copy_from_slice(g.row(r));
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Rows picked by `indices` (repeats allowed).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("gather_rows index {bad} out of {rows} rows")));
        }
        let data: Vec<f64> = indices.iter().flat_map(|&i| x.row(i).to_vec()).collect();
        let idx = indices.to_vec();
        Ok(self.tape.record(
            Tensor::from_vec(indices.len(), cols, data),
            &[self],
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(rows, cols);
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        d.data_mut()[i * cols + c] += g.get(k, c);
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Picks single entries `(row, col)` into a `k×1` column.
    pub fn gather_elements(self, positions: &[(usize, usize)]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if let Some(p) = positions.iter().find(|p| p.0 >= rows || p.1 >= cols) {
            return Err(Error::Shape(format!("gather_elements position {p:?} outside {rows}×{cols}")));
        }
        let data: Vec<f64> = positions.iter().map(|&(r, c)| x.get(r, c)).collect();
        let pos = positions.to_vec();
        Ok(self.tape.record(
            Tensor::from_vec(positions.len(), 1, data),
            &[self],
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(rows, cols);
                for (k, &(r, c)) in pos.iter().enumerate() {
                    d.data_mut()[r * cols + c] += g.get(k, 0);
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Max over consecutive groups of `k` rows: `(n·k)×d → n×d`.
    /// Ties route the gradient to the first row of the group.
    pub fn group_max(self, k: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if k == 0 || rows % k != 0 {
            return Err(Error::Shape(format!("group_max with k={k} over {rows} rows")));
        }
        let n = rows / k;
        let mut out = vec![f64::NEG_INFINITY; n * cols];
        let mut arg = vec![0usize; n * cols];
        for g in 0..n {
            for j in 0..k {
                let r = g * k + j;
                for c in 0..cols {
                    let v = x.get(r, c);
                    if v > out[g * cols + c] {
                        out[g * cols + c] = v;
                        arg[g * cols + c] = r;
                    }
                }
            }
        }
        Ok(self.tape.record(
            Tensor::from_vec(n, cols, out),
            &[self],
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(rows, cols);
                for (i, &r) in arg.iter().enumerate() {
                    let c = i % cols;
                    d.data_mut()[r * cols + c] += g.data()[i];
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Euclidean distances between the rows of `self` (`n×c`) and `other` (`m×c`).
    pub fn pairwise_distances(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.cols() != b.cols() {
            return Err(shape_err("pairwise_distances", a.shape(), b.shape()));
        }
        let (n, m, c) = (a.rows(), b.rows(), a.cols());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let d2: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                out.push(d2.sqrt());
            }
        }
        Ok(self.tape.record(
            Tensor::from_vec(n, m, out),
            &[self, other],
            Box::new(move |g, p, y| {
                let (a, b) = (p[0], p[1]);
                let mut da = Tensor::zeros(n, c);
                let mut db = Tensor::zeros(m, c);
                for i in 0..n {
                    for j in 0..m {
                        let dist = y.get(i, j);
                        if dist == 0.0 {
                            continue;
                        }
                        let s = g.get(i, j) / dist;
                        for k in 0..c {
                            let diff = (a.get(i, k) - b.get(j, k)) * s;
                            da.data_mut()[i * c + k] += diff;
                            db.data_mut()[j * c + k] -= diff;
                        }
                    }
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Row minima `n×m → n×1`; ties go to the lowest column.
    pub fn min_rows(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let arg: Vec<usize> = (0..rows)
            .map(|r| {
                let row = x.row(r);
                (0..cols).fold(0, |best, c| if row[c] < row[best] { c } else { best })
            })
            .collect();
        let out: Vec<f64> = arg.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        self.tape.record(
            Tensor::from_vec(rows, 1, out),
            &[self],
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(rows, cols);
                for (r, &c) in arg.iter().enumerate() {
                    d.data_mut()[r * cols + c] = g.get(r, 0);
                }
                vec![Some(d)]
            }),
        )
    }

    /// Column minima `n×m → 1×m`.
    pub fn min_cols(self) -> Var<'t> {
        self.transpose().min_rows().transpose()
    }

    /// `e[i][j] = q[i] · r[i·m + j]` for `q: n×d`, `r: (n·m)×d`, giving `n×m`.
    pub fn pair_scores(self, pairs: Var<'t>, m: usize) -> Result<Var<'t>> {
        let (q, r) = (self.value(), pairs.value());
        let (n, d) = (q.rows(), q.cols());
        if r.rows() != n * m || r.cols() != d {
            return Err(shape_err("pair_scores", q.shape(), r.shape()));
        }
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let qi = q.row(i);
            for j in 0..m {
                out.push(qi.iter().zip(r.row(i * m + j)).map(|(a, b)| a * b).sum());
            }
        }
        Ok(self.tape.record(
            Tensor::from_vec(n, m, out),
            &[self, pairs],
            Box::new(move |g, p, _| {
                let (q, r) = (p[0], p[1]);
                let mut dq = Tensor::zeros(n, d);
                let mut dr = Tensor::zeros(n * m, d);
                for i in 0..n {
                    for j in 0..m {
                        let gij = g.get(i, j);
                        let row = i * m + j;
                        for k in 0..d {
                            dq.data_mut()[i * d + k] += gij * r.get(row, k);
                            dr.data_mut()[row * d + k] = gij * q.get(i, k);
                        }
                    }
                }
                vec![Some(dq), Some(dr)]
            }),
        ))
    }

    /// `out[i] = Σⱼ a[i][j] · r[i·m + j]` for `a: n×m`, `r: (n·m)×d`, giving `n×d`.
    pub fn pair_weighted_sum(self, pairs: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), pairs.value());
        let (n, m) = (a.rows(), a.cols());
        if r.rows() != n * m {
            return Err(shape_err("pair_weighted_sum", a.shape(), r.shape()));
        }
        let d = r.cols();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..m {
                let w = a.get(i, j);
                for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(r.row(i * m + j)) {
                    *o += w * v;
                }
            }
        }
        Ok(self.tape.record(
            Tensor::from_vec(n, d, out),
            &[self, pairs],
            Box::new(move |g, p, _| {
                let (a, r) = (p[0], p[1]);
                let mut da = Tensor::zeros(n, m);
                let mut dr = Tensor::zeros(n * m, d);
                for i in 0..n {
                    let gi = g.row(i);
                    for j in 0..m {
                        let row = i * m + j;
                        da.data_mut()[i * m + j] = gi.iter().zip(r.row(row)).map(|(x, y)| x * y).sum();
                        let w = a.get(i, j);
                        for k in 0..d {
                            dr.data_mut()[row * d + k] = w * gi[k];
                        }
                    }
                }
                vec![Some(da), Some(dr)]
            }),
        ))
    }
}
