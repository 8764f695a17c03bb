//! Pairwise geometric structure embeddings.
//!
//! Everything here depends only on coordinates, so it is computed once per
//! cloud as constant `L²×d` tables (row `i·L + j` for the pair `(i, j)`). The
//! learned projections are applied later, folded into the attention scores.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::cloud::SpatialIndex;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// `[sin(x/10000^{2i/d}), cos(x/10000^{2i/d})]` interleaved, for even `d`.
pub fn sinusoidal_embed(x: f64, d: usize) -> Result<Vec<f64>> {
    if !d.is_multiple_of(2) {
        return Err(Error::Parameter(format!("sinusoidal width must be even, got {d}")));
    }
    let mut out = vec![0.0; d];
    fill_sinusoid(x, &frequencies(d), &mut out);
    Ok(out)
}

fn frequencies(d: usize) -> Vec<f64> {
    (0..d / 2).map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64)).collect()
}

fn fill_sinusoid(x: f64, freqs: &[f64], out: &mut [f64]) {
    for (i, f) in freqs.iter().enumerate() {
        let (s, c) = (x * f).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
}

/// Angle between `u` and `v` in radians; 0 when either is shorter than 1e-12.
pub fn angle_between(u: &Vector3<f64>, v: &Vector3<f64>) -> f64 {
    if u.norm() < 1e-12 || v.norm() < 1e-12 {
        return 0.0;
    }
    u.cross(v).norm().atan2(u.dot(v))
}

/// Constant embedding tables of one token sequence.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub len: usize,
    /// Sinusoid of the pairwise distance.
    pub distance: Tensor,
    /// Mean over each token's neighbours of the angular sinusoid.
    pub angle: Tensor,
    /// Sinusoid of the skeleton distance-sum difference `ρ_i − ρ_j`.
    pub skeleton_distance: Tensor,
    /// Mean over each token's nearest skeleton points of the angular sinusoid.
    pub skeleton_angle: Tensor,
    /// `ρ_j`: summed distance from token `j` to its nearest skeleton points.
    pub rho: Vec<f64>,
}

/// Neighbour positions of each token, excluding the token itself.
fn token_neighbours(positions: &[Point3<f64>], k: usize) -> Result<Vec<Vec<Point3<f64>>>> {
    let index = SpatialIndex::from_points(positions.to_vec());
    let k = k.min(positions.len().saturating_sub(1));
    positions
        .iter()
        .enumerate()
        .map(|(j, p)| {
            if k == 0 {
                return Ok(Vec::new());
            }
            let mut hits = index.knn(p, k + 1)?;
            match hits.iter().position(|n| n.index == j) {
                Some(pos) => {
                    hits.remove(pos);
                }
                None => {
                    hits.pop();
                }
            }
            Ok(hits.into_iter().map(|n| positions[n.index]).collect())
        })
        .collect()
}

/// Row `i·L + j` of a table built by `f(i, j, out)` in parallel over `i`.
fn pair_table(len: usize, d: usize, f: impl Fn(usize, usize, &mut [f64]) + Sync) -> Tensor {
    let mut data = vec![0.0; len * len * d];
    data.par_chunks_mut(len * d).enumerate().for_each(|(i, block)| {
        for (j, out) in block.chunks_mut(d).enumerate() {
            f(i, j, out);
        }
    });
    Tensor::new(len * len, d, data).expect("table size")
}

/// Mean over `anchors` of the sinusoid of `∠(a − p_j, p_i − p_j)` in units of `sigma_deg`.
fn mean_angle_sinusoid(
    pi: &Point3<f64>,
    pj: &Point3<f64>,
    anchors: &[Point3<f64>],
    sigma_deg: f64,
    freqs: &[f64],
    scratch: &mut [f64],
    out: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if anchors.is_empty() {
        return;
    }
    let v = pi - pj;
    for a in anchors {
        let theta = angle_between(&(a - pj), &v).to_degrees() / sigma_deg;
        fill_sinusoid(theta, freqs, scratch);
        for (o, s) in out.iter_mut().zip(scratch.iter()) {
            *o += s;
        }
    }
    let inv = 1.0 / anchors.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

impl Geometry {
    /// Tables for `positions` (all tokens) given the cloud's `skeleton` points.
    pub fn new(positions: &[Point3<f64>], skeleton: &[Point3<f64>], cfg: &Config) -> Result<Self> {
        let len = positions.len();
        let d = cfg.d_model;
        if len < 2 {
            return Err(Error::DegenerateInput(format!("need at least 2 tokens, got {len}")));
        }
        if skeleton.len() < cfg.skeleton_knn {
            return Err(Error::Parameter(format!(
                "{} skeleton points cannot supply {} neighbours",
                skeleton.len(),
                cfg.skeleton_knn
            )));
        }
        if !d.is_multiple_of(2) {
            return Err(Error::Parameter(format!("sinusoidal width must be even, got {d}")));
        }
        let freqs = frequencies(d);

        let distance = pair_table(len, d, |i, j, out| {
            fill_sinusoid((positions[i] - positions[j]).norm() / cfg.sigma_d, &freqs, out)
        });

        let neighbours = token_neighbours(positions, cfg.angle_knn)?;
        let angle = pair_table(len, d, |i, j, out| {
            let mut scratch = vec![0.0; d];
            mean_angle_sinusoid(
                &positions[i],
                &positions[j],
                &neighbours[j],
                cfg.sigma_a_deg,
                &freqs,
                &mut scratch,
                out,
            )
        });

        let skel_index = SpatialIndex::from_points(skeleton.to_vec());
        let mut skel_neighbours = Vec::with_capacity(len);
        let mut rho = Vec::with_capacity(len);
        for p in positions {
            let hits = skel_index.knn(p, cfg.skeleton_knn)?;
            rho.push(hits.iter().map(|n| n.distance).sum());
            skel_neighbours.push(hits.iter().map(|n| skeleton[n.index]).collect::<Vec<_>>());
        }
        let skeleton_distance = pair_table(len, d, |i, j, out| {
            fill_sinusoid((rho[i] - rho[j]) / cfg.sigma_d_skel, &freqs, out)
        });
        let skeleton_angle = pair_table(len, d, |i, j, out| {
            let mut scratch = vec![0.0; d];
            mean_angle_sinusoid(
                &positions[i],
                &positions[j],
                &skel_neighbours[j],
                cfg.sigma_a_skel_deg,
                &freqs,
                &mut scratch,
                out,
            )
        });
        Ok(Self {
            len,
            distance,
            angle,
            skeleton_distance,
            skeleton_angle,
            rho,
        })
    }

    pub fn vars<'t>(&self, tape: &'t Tape) -> GeometryVars<'t> {
        GeometryVars {
            len: self.len,
            distance: tape.constant(self.distance.clone()),
            angle: tape.constant(self.angle.clone()),
            skeleton_distance: tape.constant(self.skeleton_distance.clone()),
            skeleton_angle: tape.constant(self.skeleton_angle.clone()),
        }
    }
}

/// [`Geometry`] tables recorded on a tape.
#[derive(Clone, Copy)]
pub struct GeometryVars<'t> {
    pub len: usize,
    pub distance: Var<'t>,
    pub angle: Var<'t>,
    pub skeleton_distance: Var<'t>,
    pub skeleton_angle: Var<'t>,
}

/// Materialised point-wise structure embedding `r_p` (`L²×d`).
pub fn point_structure_embedding<'t>(tape: &'t Tape, geom: &Geometry, store: &ParameterStore) -> Result<Var<'t>> {
    let g = geom.vars(tape);
    let wd = tape.param(store, "encoder.embed.distance")?;
    let wa = tape.param(store, "encoder.embed.angle")?;
    g.distance.matmul(wd)?.add(g.angle.matmul(wa)?)
}

/// Materialised skeleton-aware structure embedding `r_s` (`L²×d`).
pub fn skeleton_structure_embedding<'t>(tape: &'t Tape, geom: &Geometry, store: &ParameterStore) -> Result<Var<'t>> {
    let g = geom.vars(tape);
    let wd = tape.param(store, "encoder.embed.skeleton_distance")?;
    let wa = tape.param(store, "encoder.embed.skeleton_angle")?;
    g.skeleton_distance.matmul(wd)?.add(g.skeleton_angle.matmul(wa)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn sinusoid_basics() {
        assert_eq!(sinusoidal_embed(0.0, 6).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_embed(PI, 2).unwrap();
        assert!(e[0].abs() < 1e-15 && (e[1] + 1.0).abs() < 1e-15);
        assert!(sinusoidal_embed(1.0, 3).is_err());
        assert!(sinusoidal_embed(123.4, 64).unwrap().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn degenerate_angles_are_zero() {
        let z = Vector3::zeros();
        assert_eq!(angle_between(&z, &Vector3::x()), 0.0);
        assert!((angle_between(&Vector3::x(), &Vector3::y()) - PI / 2.0).abs() < 1e-15);
        assert!((angle_between(&Vector3::x(), &-Vector3::x()) - PI).abs() < 1e-15);
    }
}
