//! Hierarchical point feature extractor.
//!
//! Repeated voxel downsampling builds the levels. Each level aggregates its
//! k nearest points of the level below with a shared two-layer perceptron over
//! `[relative coordinate ‖ neighbour feature]` and a max over neighbours. A
//! top-down pass then adds projected coarse features into the finer levels
//! down to the dense level.

use nalgebra::Point3;
use rand::Rng;
use rayon::prelude::*;

use crate::cloud::{voxel_downsample, PointCloud, SpatialIndex};
use crate::config::{Config, LocalFrame};
use crate::error::{Error, Result};
use crate::layers::{init_linear, linear};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// Dense-point ownership by superpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    /// Nearest superpoint of every dense point.
    pub owner: Vec<usize>,
    /// Per superpoint, its dense points sorted by distance (then index),
    /// truncated to the patch size.
    pub members: Vec<Vec<usize>>,
}

impl Patches {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub struct PyramidLevel<'t> {
    pub points: PointCloud,
    pub features: Var<'t>,
}

pub struct FeaturePyramid<'t> {
    pub levels: Vec<PyramidLevel<'t>>,
    pub superpoint_level: usize,
    pub dense_level: usize,
    pub patches: Patches,
}

impl<'t> FeaturePyramid<'t> {
    pub fn superpoints(&self) -> &PointCloud {
        &self.levels[self.superpoint_level].points
    }

    pub fn superpoint_features(&self) -> Var<'t> {
        self.levels[self.superpoint_level].features
    }

    pub fn dense_points(&self) -> &PointCloud {
        &self.levels[self.dense_level].points
    }

    pub fn dense_features(&self) -> Var<'t> {
        self.levels[self.dense_level].features
    }
}

/// Feature width of each level: `d_dense` up to the dense level, doubling
/// above it, capped at `d_model`; the superpoint level is `d_model`.
pub fn level_widths(cfg: &Config) -> Vec<usize> {
    let top = cfg.superpoint_level();
    (0..=top)
        .map(|l| {
            if l == top {
                cfg.d_model
            } else if l <= cfg.dense_level {
                cfg.d_dense
            } else {
                (cfg.d_dense << (l - cfg.dense_level)).min(cfg.d_model)
            }
        })
        .collect()
}

pub fn init_params(store: &mut ParameterStore, cfg: &Config, rng: &mut impl Rng) -> Result<()> {
    let widths = level_widths(cfg);
    for (l, &w) in widths.iter().enumerate() {
        let input = 3 + if l == 0 { 1 } else { widths[l - 1] };
        init_linear(store, &format!("backbone.level{l}.mlp1"), input, w, rng)?;
        init_linear(store, &format!("backbone.level{l}.mlp2"), w, w, rng)?;
    }
    for l in cfg.dense_level..cfg.superpoint_level() {
        init_linear(store, &format!("backbone.fuse{l}.lateral"), widths[l], widths[l], rng)?;
        init_linear(store, &format!("backbone.fuse{l}.up"), widths[l + 1], widths[l], rng)?;
    }
    init_linear(store, "backbone.out_coarse", cfg.d_model, cfg.d_model, rng)?;
    init_linear(store, "backbone.out_dense", cfg.d_dense, cfg.d_dense, rng)?;
    Ok(())
}

/// Flattened k-nearest indices of every query, `k` per query.
pub(crate) fn knn_indices(index: &SpatialIndex, queries: &[Point3<f64>], k: usize) -> Result<Vec<usize>> {
    let rows: Vec<Vec<usize>> = queries
        .par_iter()
        .map(|q| index.knn(q, k).map(|n| n.into_iter().map(|n| n.index).collect()))
        .collect::<Result<_>>()?;
    Ok(rows.concat())
}

fn relative_coordinates(
    queries: &[Point3<f64>],
    reference: &[Point3<f64>],
    neighbours: &[usize],
    k: usize,
    scale: f64,
    frame: LocalFrame,
) -> Tensor {
    let mut data = Vec::with_capacity(neighbours.len() * 3);
    for (row, &j) in neighbours.iter().enumerate() {
        let d = (reference[j] - queries[row / k]) / scale;
        match frame {
            LocalFrame::Yaw => data.extend([d.x.hypot(d.y), d.z, d.norm()]),
            LocalFrame::Raw => data.extend([d.x, d.y, d.z]),
        }
    }
    Tensor::new(neighbours.len(), 3, data).expect("three values per neighbour")
}

/// Builds the pyramid of `cloud` and records its features on `tape`.
pub fn extract_pyramid<'t>(
    tape: &'t Tape,
    cloud: &PointCloud,
    store: &ParameterStore,
    cfg: &Config,
) -> Result<FeaturePyramid<'t>> {
    let mut clouds = Vec::with_capacity(cfg.voxel_sizes.len());
    let mut current = voxel_downsample(cloud, cfg.voxel_sizes[0])?;
    if current.is_empty() {
        return Err(Error::DegenerateInput("empty cloud after voxelization".into()));
    }
    clouds.push(current.clone());
    for &v in &cfg.voxel_sizes[1..] {
        current = voxel_downsample(&current, v)?;
        clouds.push(current.clone());
    }
    let top = cfg.superpoint_level();
    if clouds[top].len() < 4 {
        return Err(Error::DegenerateInput(format!(
            "only {} superpoints, need at least 4",
            clouds[top].len()
        )));
    }

    let mut raw: Vec<Var<'t>> = Vec::with_capacity(clouds.len());
    for (l, level) in clouds.iter().enumerate() {
        let reference = if l == 0 { level } else { &clouds[l - 1] };
        let index = SpatialIndex::new(reference);
        let k = cfg.backbone_knn.min(reference.len());
        let neighbours = knn_indices(&index, level.points(), k)?;
        let rel = relative_coordinates(
            level.points(),
            reference.points(),
            &neighbours,
            k,
            cfg.voxel_sizes[l],
            cfg.local_frame,
        );
        let rel = tape.constant(rel);
        let gathered = if l == 0 {
            tape.constant(Tensor::full(neighbours.len(), 1, 1.0))
        } else {
            raw[l - 1].gather_rows(&neighbours)?
        };
        let input = Var::concat_cols(&[rel, gathered])?;
        let h = linear(tape, store, &format!("backbone.level{l}.mlp1"), input)?.relu();
        let h = linear(tape, store, &format!("backbone.level{l}.mlp2"), h)?.relu();
        raw.push(h.group_max(k)?);
    }

    let mut fused = raw.clone();
    for l in (cfg.dense_level..top).rev() {
        let coarse = SpatialIndex::new(&clouds[l + 1]);
        let parents: Vec<usize> = clouds[l]
            .points()
            .iter()
            .map(|p| coarse.nearest(p).expect("coarser level is non-empty").index)
            .collect();
        let lateral = linear(tape, store, &format!("backbone.fuse{l}.lateral"), raw[l])?;
        let up = linear(tape, store, &format!("backbone.fuse{l}.up"), fused[l + 1].gather_rows(&parents)?)?;
        fused[l] = lateral.add(up)?.relu();
    }
    fused[top] = linear(tape, store, "backbone.out_coarse", raw[top])?;
    fused[cfg.dense_level] = linear(tape, store, "backbone.out_dense", fused[cfg.dense_level])?;

    let patches = assign_patches(&clouds[top], &clouds[cfg.dense_level], cfg.patch_size);
    let levels = clouds
        .into_iter()
        .zip(fused)
        .map(|(points, features)| PyramidLevel { points, features })
        .collect();
    Ok(FeaturePyramid {
        levels,
        superpoint_level: top,
        dense_level: cfg.dense_level,
        patches,
    })
}

/// Assigns each dense point to its nearest superpoint (lower index on ties)
/// and keeps the `patch_size` closest members of each patch.
pub fn assign_patches(superpoints: &PointCloud, dense: &PointCloud, patch_size: usize) -> Patches {
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); superpoints.len()];
    let mut owner = Vec::with_capacity(dense.len());
    if superpoints.is_empty() {
        return Patches { owner, members: Vec::new() };
    }
    let index = SpatialIndex::new(superpoints);
    for (i, p) in dense.points().iter().enumerate() {
        let n = index.nearest(p).expect("non-empty index");
        owner.push(n.index);
        members[n.index].push((n.distance, i));
    }
    let members = members
        .into_iter()
        .map(|mut m| {
            m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            m.truncate(patch_size);
            m.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    Patches { owner, members }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_follow_levels() {
        let cfg = Config::default();
        assert_eq!(level_widths(&cfg), vec![64, 64, 128, 256]);
        assert_eq!(level_widths(&Config::toy()), vec![16, 16, 32, 32]);
    }

    #[test]
    fn patch_ties_go_to_lower_superpoint() {
        let sp = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let dense = PointCloud::from_xyz(&[[1.0, 0.0, 0.0], [1.9, 0.0, 0.0], [0.2, 0.0, 0.0]]).unwrap();
        let p = assign_patches(&sp, &dense, 8);
        assert_eq!(p.owner, vec![0, 1, 0]);
        assert_eq!(p.members, vec![vec![2, 0], vec![1]]);
        let p1 = assign_patches(&sp, &dense, 1);
        assert_eq!(p1.members, vec![vec![2], vec![1]]);
    }
}
