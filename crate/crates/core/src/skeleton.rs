//! Skeleton extraction: convex combinations of superpoints that approximate
//! medial sphere centres, with radii and features.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cloud::PointCloud;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::layers::{init_linear, linear};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

pub struct Skeleton<'t> {
    /// `N_s×3` sphere centres.
    pub points: Var<'t>,
    /// `N_s×1`.
    pub radii: Var<'t>,
    /// `N_s×d_model`.
    pub features: Var<'t>,
    /// `n×N_s`, every column on the simplex.
    pub weights: Var<'t>,
}

impl Skeleton<'_> {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point_cloud(&self) -> PointCloud {
        tensor_to_cloud(&self.points.value())
    }
}

pub(crate) fn cloud_to_tensor(cloud: &PointCloud) -> Tensor {
    Tensor::new(cloud.len(), 3, cloud.to_flat()).expect("three coordinates per point")
}

pub(crate) fn tensor_to_cloud(t: &Tensor) -> PointCloud {
    let pts = (0..t.rows()).map(|r| nalgebra::Point3::new(t.get(r, 0), t.get(r, 1), t.get(r, 2))).collect();
    PointCloud::new(pts).expect("finite skeleton coordinates")
}

pub fn init_params(store: &mut ParameterStore, cfg: &Config, rng: &mut impl Rng) -> Result<()> {
    init_linear(store, "skeleton.mlp1", cfg.d_model, cfg.d_model, rng)?;
    init_linear(store, "skeleton.mlp2", cfg.d_model, cfg.skeleton_points, rng)
}

/// Weight logits from the shared MLP. Its input is detached so no gradient
/// reaches the backbone through this path.
pub fn weight_logits<'t>(tape: &'t Tape, features: Var<'t>, store: &ParameterStore) -> Result<Var<'t>> {
    let h = linear(tape, store, "skeleton.mlp1", features.detach())?.relu();
    linear(tape, store, "skeleton.mlp2", h)
}

pub fn extract_skeleton<'t>(
    tape: &'t Tape,
    superpoints: &PointCloud,
    features: Var<'t>,
    store: &ParameterStore,
) -> Result<Skeleton<'t>> {
    if superpoints.len() < 4 {
        return Err(Error::DegenerateInput(format!(
            "skeleton extraction needs at least 4 superpoints, got {}",
            superpoints.len()
        )));
    }
    let weights = weight_logits(tape, features, store)?.col_softmax();
    skeleton_from_weights(tape, superpoints, features, weights)
}

/// Skeleton for given column-stochastic `weights` (`n×N_s`).
pub fn skeleton_from_weights<'t>(
    tape: &'t Tape,
    superpoints: &PointCloud,
    features: Var<'t>,
    weights: Var<'t>,
) -> Result<Skeleton<'t>> {
    let p = tape.constant(cloud_to_tensor(superpoints));
    let wt = weights.transpose();
    let points = wt.matmul(p)?;
    let features = wt.matmul(features)?;
    let radii = compute_radii(p, points, weights)?;
    Ok(Skeleton {
        points,
        radii,
        features,
        weights,
    })
}

/// Radius of each skeleton point: the weighted mean, under its weight
/// column, of every superpoint's distance to its nearest skeleton point.
pub fn compute_radii<'t>(superpoints: Var<'t>, skeleton_points: Var<'t>, weights: Var<'t>) -> Result<Var<'t>> {
    let nearest = superpoints.pairwise_distances(skeleton_points)?.min_rows();
    weights.transpose().matmul(nearest)
}

/// `count` unit vectors drawn uniformly on the sphere.
pub fn sphere_directions(count: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(count * 3);
    while data.len() < count * 3 {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            data.extend((v / n).iter());
        }
    }
    Tensor::new(count, 3, data).expect("three values per direction")
}

/// The three skeleton loss terms and their weighted total.
pub struct SkeletonLoss<'t> {
    pub total: Var<'t>,
    /// Symmetric Chamfer distance between superpoints and sphere samples.
    pub sampling: Var<'t>,
    /// Point-to-sphere residuals in both directions.
    pub point_to_sphere: Var<'t>,
    /// Negative mean radius.
    pub radius: Var<'t>,
}

/// Skeleton loss with `directions` (`N_s·m × 3` unit vectors, sphere-major).
pub fn skeleton_loss_with<'t>(
    superpoints: &PointCloud,
    skel: &Skeleton<'t>,
    directions: &Tensor,
    cfg: &Config,
) -> Result<SkeletonLoss<'t>> {
    let tape = skel.points.tape();
    let ns = skel.len();
    if ns == 0 || !directions.rows().is_multiple_of(ns) {
        return Err(Error::Shape(format!(
            "{} sphere directions for {ns} skeleton points",
            directions.rows()
        )));
    }
    let m = directions.rows() / ns;
    let p = tape.constant(cloud_to_tensor(superpoints));
    let owners: Vec<usize> = (0..ns).flat_map(|i| std::iter::repeat_n(i, m)).collect();
    let centres = skel.points.gather_rows(&owners)?;
    let radii = skel.radii.gather_rows(&owners)?;
    let samples = centres.add(radii.mul(tape.constant(directions.clone()))?)?;
    let chamfer = p.pairwise_distances(samples)?;
    let sampling = chamfer.min_rows().mean().add(chamfer.min_cols().mean())?;

    let residual = p
        .pairwise_distances(skel.points)?
        .sub(skel.radii.transpose())?
        .abs();
    let point_to_sphere = residual.min_rows().sum().add(residual.min_cols().sum())?;
    let radius = skel.radii.mean().neg();
    let total = sampling
        .add(point_to_sphere.scale(cfg.lambda_p2s))?
        .add(radius.scale(cfg.lambda_radius))?;
    Ok(SkeletonLoss {
        total,
        sampling,
        point_to_sphere,
        radius,
    })
}

/// Skeleton loss with `sphere_samples` fresh directions per sphere from `rng`.
pub fn skeleton_loss<'t>(
    superpoints: &PointCloud,
    skel: &Skeleton<'t>,
    cfg: &Config,
    rng: &mut impl Rng,
) -> Result<SkeletonLoss<'t>> {
    let dirs = sphere_directions(skel.len() * cfg.sphere_samples, rng);
    skeleton_loss_with(superpoints, skel, &dirs, cfg)
}
