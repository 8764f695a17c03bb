//! Skeleton-aware geometric transformer over superpoint and skeleton tokens.

mod attention;
mod embedding;

pub use attention::{cross_attention_layer, self_attention_layer, CrossAttentionOutput, SelfAttentionOutput};
pub use embedding::{
    angle_between, point_structure_embedding, sinusoidal_embed, skeleton_structure_embedding, Geometry,
    GeometryVars,
};

use nalgebra::Point3;
use rand::Rng;

use crate::backbone::FeaturePyramid;
use crate::config::{Config, CrossKeys};
use crate::error::{Error, Result};
use crate::layers::init_projection;
use crate::skeleton::Skeleton;
use crate::tensor::{ParameterStore, Tape, Var};

pub fn init_params(store: &mut ParameterStore, cfg: &Config, rng: &mut impl Rng) -> Result<()> {
    let d = cfg.d_model;
    for name in ["distance", "angle", "skeleton_distance", "skeleton_angle"] {
        init_projection(store, &format!("encoder.embed.{name}"), d, d, rng)?;
    }
    for r in 0..cfg.interleave {
        attention::init_self_attention(store, &format!("encoder.round{r}.self"), d, rng)?;
        attention::init_cross_attention(store, &format!("encoder.round{r}.cross"), d, rng)?;
    }
    Ok(())
}

/// One cloud's token sequence: superpoints first, then skeleton points.
pub struct Tokens<'t> {
    /// `L×d_model`.
    pub features: Var<'t>,
    pub positions: Vec<Point3<f64>>,
    pub superpoint_count: usize,
    pub skeleton: Vec<Point3<f64>>,
}

impl<'t> Tokens<'t> {
    pub fn new(pyramid: &FeaturePyramid<'t>, skeleton: &Skeleton<'t>) -> Result<Self> {
        let features = Var::concat_rows(&[pyramid.superpoint_features(), skeleton.features])?;
        let skel = skeleton.point_cloud().into_points();
        let mut positions = pyramid.superpoints().points().to_vec();
        positions.extend_from_slice(&skel);
        Ok(Self {
            features,
            positions,
            superpoint_count: pyramid.superpoints().len(),
            skeleton: skel,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Encoder output for one cloud.
pub struct HybridFeatures<'t> {
    /// Superpoint rows `H`.
    pub superpoints: Var<'t>,
    /// Skeleton rows `H_s`.
    pub skeleton: Var<'t>,
}

/// Runs the interleaved (self, cross) rounds over two token sequences.
pub fn encode_tokens<'t>(
    tape: &'t Tape,
    p: &Tokens<'t>,
    q: &Tokens<'t>,
    store: &ParameterStore,
    cfg: &Config,
) -> Result<(HybridFeatures<'t>, HybridFeatures<'t>)> {
    for t in [p, q] {
        if t.features.rows() != t.len() || t.superpoint_count > t.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} tokens",
                t.features.rows(),
                t.len()
            )));
        }
    }
    let (mut xp, mut xq) = (p.features, q.features);
    if cfg.interleave > 0 {
        let gp = Geometry::new(&p.positions, &p.skeleton, cfg)?.vars(tape);
        let gq = Geometry::new(&q.positions, &q.skeleton, cfg)?.vars(tape);
        let (keys_p, keys_q) = match cfg.cross_keys {
            CrossKeys::Full => (p.len(), q.len()),
            CrossKeys::Superpoints => (p.superpoint_count, q.superpoint_count),
        };
        for r in 0..cfg.interleave {
            let prefix = format!("encoder.round{r}.self");
            let sp = self_attention_layer(tape, xp, &gp, store, &prefix, cfg)?;
            let sq = self_attention_layer(tape, xq, &gq, store, &prefix, cfg)?;
            let prefix = format!("encoder.round{r}.cross");
            let (cp, cq) = cross_attention_layer(
                tape,
                sp.output,
                sp.positional,
                keys_p,
                sq.output,
                sq.positional,
                keys_q,
                store,
                &prefix,
                cfg,
            )?;
            xp = cp.output;
            xq = cq.output;
        }
    }
    Ok((split(xp, p.superpoint_count)?, split(xq, q.superpoint_count)?))
}

fn split(x: Var<'_>, n: usize) -> Result<HybridFeatures<'_>> {
    let rows = x.rows();
    Ok(HybridFeatures {
        superpoints: x.gather_rows(&(0..n).collect::<Vec<_>>())?,
        skeleton: x.gather_rows(&(n..rows).collect::<Vec<_>>())?,
    })
}

/// Encodes both clouds from their pyramids and skeletons.
pub fn encode<'t>(
    tape: &'t Tape,
    pyr_p: &FeaturePyramid<'t>,
    skel_p: &Skeleton<'t>,
    pyr_q: &FeaturePyramid<'t>,
    skel_q: &Skeleton<'t>,
    store: &ParameterStore,
    cfg: &Config,
) -> Result<(HybridFeatures<'t>, HybridFeatures<'t>)> {
    let p = Tokens::new(pyr_p, skel_p)?;
    let q = Tokens::new(pyr_q, skel_q)?;
    encode_tokens(tape, &p, &q, store, cfg)
}
