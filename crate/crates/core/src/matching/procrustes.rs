use nalgebra::{Matrix3, Point3, Vector3};

use crate::cloud::RigidTransform;
use crate::error::{Error, Result};

/// Closed-form weighted least-squares rigid fit minimising
/// `Σ wᵢ ‖R pᵢ + t − qᵢ‖²`, with the reflection case corrected so `det R = +1`.
pub fn weighted_procrustes(src: &[Point3<f64>], tgt: &[Point3<f64>], weights: &[f64]) -> Result<RigidTransform> {
    let n = src.len();
    if tgt.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "procrustes inputs have lengths {n}, {}, {}",
            tgt.len(),
            weights.len()
        )));
    }
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!("need at least 3 correspondences, got {n}")));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Parameter("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Parameter("weights sum to zero".into()));
    }

    let mut src_mean = Vector3::zeros();
    let mut tgt_mean = Vector3::zeros();
    for ((p, q), w) in src.iter().zip(tgt).zip(weights) {
        src_mean += p.coords * *w;
        tgt_mean += q.coords * *w;
    }
    src_mean /= total;
    tgt_mean /= total;

    let mut cov = Matrix3::zeros();
    for ((p, q), w) in src.iter().zip(tgt).zip(weights) {
        cov += (p.coords - src_mean) * (q.coords - tgt_mean).transpose() * (*w / total);
    }

    let svd = cov.svd(true, true);
    // nalgebra does not guarantee ordering.
    let sv = svd.singular_values;
    let mut s = [sv[0], sv[1], sv[2]];
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
        return Err(Error::DegenerateGeometry(
            "weighted cross-covariance has rank < 2".into(),
        ));
    }
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        // Flip the direction paired with the smallest singular value.
        let smallest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let translation = tgt_mean - rotation * src_mean;
    Ok(RigidTransform::new_unchecked(rotation, translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::apply_transform;
    use crate::cloud::PointCloud;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)))
            .collect()
    }

    #[test]
    fn identity_on_equal_sets() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let p = random_points(&mut rng, 10);
        let t = weighted_procrustes(&p, &p, &[1.0; 10]).unwrap();
        assert!((t.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(t.translation.amax() < 1e-12);
    }

    #[test]
    fn recovers_known_transform_with_random_weights() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.random_range(3..30);
            let p = random_points(&mut rng, n);
            let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) - Vector3::repeat(0.5);
            let truth = RigidTransform::from_axis_angle(&axis, rng.random_range(-3.1..3.1), Vector3::new(1.0, -2.0, 5.0));
            let q = apply_transform(&PointCloud::new(p.clone()).unwrap(), &truth).into_points();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let est = weighted_procrustes(&p, &q, &w).unwrap();
            assert!(est.is_valid(1e-9));
            assert!((est.rotation - truth.rotation).amax() < 1e-9);
            assert!((est.translation - truth.translation).amax() < 1e-9);
        }
    }

    #[test]
    fn collinear_is_degenerate() {
        let p: Vec<_> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(weighted_procrustes(&p, &p, &[1.0; 5]), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn planar_reflection_is_corrected() {
        // A planar set mirrored through its plane: the unconstrained optimum is a
        // reflection, the result must still be a proper rotation.
        let p = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 2.0, 0.0), Point3::new(1.0, 1.0, 0.0)];
        let q: Vec<_> = p.iter().map(|p| Point3::new(-p.x, p.y, p.z)).collect();
        let t = weighted_procrustes(&p, &q, &[1.0; 4]).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_weights() {
        let p = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
        assert!(weighted_procrustes(&p, &p, &[0.0; 3]).is_err());
        assert!(weighted_procrustes(&p, &p, &[1.0, -1.0, 1.0]).is_err());
    }
}
