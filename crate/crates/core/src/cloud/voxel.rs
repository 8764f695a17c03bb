use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use super::PointCloud;
use crate::error::{Error, Result};

type VoxelKey = [i64; 3];

/// Spreads the low 21 bits of `v` so that three of them interleave into 63 bits.
fn spread21(v: i64) -> u64 {
    let mut x = (v as u64) & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f00000000ffff;
    x = (x | (x << 16)) & 0x1f0000ff0000ff;
    x = (x | (x << 8)) & 0x100f00f00f00f00f;
    x = (x | (x << 4)) & 0x10c30c30c30c30c3;
    x = (x | (x << 2)) & 0x1249249249249249;
    x
}

fn morton(key: &VoxelKey) -> u64 {
    spread21(key[0]) | (spread21(key[1]) << 1) | (spread21(key[2]) << 2)
}

struct Cell {
    key: VoxelKey,
    sum: Vector3<f64>,
    attr: f64,
    count: usize,
}

/// One point per occupied voxel, at the centroid of the points inside it.
/// Output follows the order in which voxels are first touched.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::Parameter(format!("voxel size must be positive, got {voxel_size}")));
    }
    let attrs = cloud.attributes();
    let mut cells: Vec<Cell> = Vec::new();
    // Morton codes truncate to 21 bits per axis and can collide; buckets keep
    // the exact key so colliding voxels stay distinct.
    let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let key = [
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        ];
        let bucket = buckets.entry(morton(&key)).or_default();
        let cell = match bucket.iter().find(|&&c| cells[c].key == key) {
            Some(&c) => c,
            None => {
                cells.push(Cell {
                    key,
                    sum: Vector3::zeros(),
                    attr: 0.0,
                    count: 0,
                });
                bucket.push(cells.len() - 1);
                cells.len() - 1
            }
        };
        let cell = &mut cells[cell];
        cell.sum += p.coords;
        cell.count += 1;
        if let Some(a) = attrs {
            cell.attr += a[i];
        }
    }
    let points = cells
        .iter()
        .map(|c| Point3::from(c.sum / c.count as f64))
        .collect();
    let attributes = attrs.map(|_| cells.iter().map(|c| c.attr / c.count as f64).collect());
    PointCloud::with_attributes(points, attributes)
}
