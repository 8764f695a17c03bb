//! Point cloud containers, rigid transforms and the geometric primitives the
//! rest of the pipeline is built on.

mod icp;
pub mod io;
mod kdtree;
mod voxel;

pub use icp::{icp_refine, IcpOptions, IcpResult};
pub use kdtree::{Neighbor, SpatialIndex};
pub use voxel::voxel_downsample;

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// An ordered set of 3D points with an optional per-point scalar attribute.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    attributes: Option<Vec<f64>>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        Self::with_attributes(points, None)
    }

    pub fn with_attributes(points: Vec<Point3<f64>>, attributes: Option<Vec<f64>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::Parameter(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(attr) = &attributes {
            if attr.len() != points.len() {
                return Err(Error::Parameter(format!(
                    "attribute count {} does not match point count {}",
                    attr.len(),
                    points.len()
                )));
            }
        }
        Ok(Self { points, attributes })
    }

    pub fn from_xyz(coords: &[[f64; 3]]) -> Result<Self> {
        Self::new(coords.iter().map(|c| Point3::new(c[0], c[1], c[2])).collect())
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn attributes(&self) -> Option<&[f64]> {
        self.attributes.as_deref()
    }

    pub fn point(&self, i: usize) -> Point3<f64> {
        self.points[i]
    }

    /// Keeps the points whose index satisfies `keep`, preserving order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            attributes: self
                .attributes
                .as_ref()
                .map(|a| indices.iter().map(|&i| a[i]).collect()),
        }
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }

    /// Per-axis (min, max) bounds.
    pub fn bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (
                Point3::from(lo.coords.inf(&p.coords)),
                Point3::from(hi.coords.sup(&p.coords)),
            )
        }))
    }

    /// Flattened row-major `n × 3` coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn into_points(self) -> Vec<Point3<f64>> {
        self.points
    }
}

/// A rigid motion `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Builds a transform after checking `RᵀR = I` and `det R = +1`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self { rotation, translation };
        if !t.is_valid(ROTATION_TOLERANCE) {
            return Err(Error::Parameter("rotation is not in SO(3)".into()));
        }
        Ok(t)
    }

    /// Builds a transform without validation. Callers guarantee `rotation ∈ SO(3)`.
    pub fn new_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Projects an arbitrary 3×3 matrix onto the nearest rotation, e.g. after
    /// reading a pose with truncated decimals.
    pub fn from_approximate(matrix: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let svd = matrix.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let d = (u * v_t).determinant().signum();
        let rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
        if !rotation.iter().all(|x| x.is_finite()) || !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Parameter("non-finite pose".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self {
            rotation: rot.into_inner(),
            translation,
        }
    }

    /// Z-Y-X Euler angles (radians).
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::from_euler_angles(roll, pitch, yaw).into_inner(),
            translation,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        r.iter().all(|x| x.is_finite())
            && self.translation.iter().all(|x| x.is_finite())
            && (r.transpose() * r - Matrix3::identity()).amax() <= tol
            && (r.determinant() - 1.0).abs() <= tol
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Self::from_approximate(rotation, translation)
    }

    /// Rotation angle in radians, numerically stable near 0 and π.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

/// Angle of a rotation matrix. Equal to `acos((tr R − 1)/2)` but evaluated as
/// `atan2(|axial part|, (tr R − 1)/2)` so tiny angles keep full precision.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = (r.trace() - 1.0) / 2.0;
    let axial = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = axial.norm() / 2.0;
    sin.atan2(cos).clamp(0.0, std::f64::consts::PI)
}

/// Maps every point through `t`, keeping attributes.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        attributes: cloud.attributes.clone(),
    }
}

/// Nearest neighbour distance from every point of `query` into `index`.
pub(crate) fn nearest_distances(index: &SpatialIndex, query: &[Point3<f64>]) -> Vec<f64> {
    query
        .iter()
        .map(|q| index.nearest(q).map(|n| n.distance).unwrap_or(f64::INFINITY))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) - Vector3::repeat(0.5);
        let t = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) * 10.0;
        RigidTransform::from_axis_angle(&axis, rng.random_range(-3.0..3.0), t)
    }

    #[test]
    fn identity_leaves_cloud_unchanged() {
        let c = PointCloud::from_xyz(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]).unwrap();
        assert_eq!(apply_transform(&c, &RigidTransform::identity()), c);
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros());
        let p = t.apply(&Point3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(p, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn inverse_round_trip_and_isometry() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        for _ in 0..50 {
            let t = random_transform(&mut rng);
            assert!(t.is_valid(1e-12));
            let pts: Vec<_> = (0..20)
                .map(|_| Point3::new(rng.random(), rng.random(), rng.random::<f64>()) * 20.0)
                .collect();
            let cloud = PointCloud::with_attributes(pts, Some((0..20).map(f64::from).collect())).unwrap();
            let moved = apply_transform(&cloud, &t);
            assert_eq!(moved.attributes(), cloud.attributes());
            let back = apply_transform(&moved, &t.inverse());
            for (a, b) in back.points().iter().zip(cloud.points()) {
                assert!((a - b).norm() < 1e-9);
            }
            for i in 0..20 {
                for j in 0..20 {
                    let d0 = (cloud.point(i) - cloud.point(j)).norm();
                    let d1 = (moved.point(i) - moved.point(j)).norm();
                    assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_attributes() {
        assert!(PointCloud::from_xyz(&[[f64::NAN, 0.0, 0.0]]).is_err());
        let pts = vec![Point3::origin(); 2];
        assert!(PointCloud::with_attributes(pts, Some(vec![1.0])).is_err());
    }

    #[test]
    fn rotation_angle_matches_trace_formula() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            let acos = ((t.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            assert_abs_diff_eq!(t.rotation_angle(), acos, epsilon = 1e-7);
        }
        let tiny = RigidTransform::from_axis_angle(&Vector3::x(), 1e-10, Vector3::zeros());
        assert_abs_diff_eq!(tiny.rotation_angle(), 1e-10, epsilon = 1e-20);
    }

    #[test]
    fn row_major_round_trip() {
        let t = RigidTransform::from_euler(0.1, -0.2, 2.0, Vector3::new(1.0, 2.0, 3.0));
        let back = RigidTransform::from_row_major_3x4(&t.to_row_major_3x4()).unwrap();
        assert!((back.rotation - t.rotation).amax() < 1e-14);
        assert_eq!(back.translation, t.translation);
    }
}
