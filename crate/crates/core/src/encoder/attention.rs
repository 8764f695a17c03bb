use rand::Rng;

use super::embedding::GeometryVars;
use crate::config::Config;
use crate::error::Result;
use crate::layers::{init_linear, init_projection, init_scaled_projection, linear};
use crate::tensor::{ParameterStore, Tape, Var, WeightInit};

/// Gain on the value and second feed-forward projections. Attention starts
/// out near uniform, so every token receives almost the same attended vector;
/// at full scale that common vector swamps the residual and the layer norms
/// collapse all tokens onto one direction before training can separate them.
const RESIDUAL_GAIN: f64 = 0.1;

pub(crate) fn init_self_attention(
    store: &mut ParameterStore,
    prefix: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for name in ["wq", "wk", "wv", "wp", "ws"] {
        init_attention_projection(store, prefix, name, d, rng)?;
    }
    init_feed_forward(store, prefix, d, rng)
}

pub(crate) fn init_cross_attention(
    store: &mut ParameterStore,
    prefix: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for name in ["wq", "wk", "wv"] {
        init_attention_projection(store, prefix, name, d, rng)?;
    }
    init_feed_forward(store, prefix, d, rng)
}

fn init_attention_projection(
    store: &mut ParameterStore,
    prefix: &str,
    name: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let path = format!("{prefix}.{name}");
    if name == "wv" {
        init_scaled_projection(store, &path, d, d, RESIDUAL_GAIN, rng)
    } else {
        init_projection(store, &path, d, d, rng)
    }
}

fn init_feed_forward(store: &mut ParameterStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<()> {
    init_linear(store, &format!("{prefix}.ffn1"), d, 2 * d, rng)?;
    init_scaled_projection(store, &format!("{prefix}.ffn2.weight"), 2 * d, d, RESIDUAL_GAIN, rng)?;
    store.init(&format!("{prefix}.ffn2.bias"), 1, d, WeightInit::Constant(0.0), rng)
}

/// `LN(x + z)` followed by `LN(y + FFN(y))`.
fn residual_block<'t>(tape: &'t Tape, store: &ParameterStore, prefix: &str, x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let y = x.add(z)?.layer_norm();
    let h = linear(tape, store, &format!("{prefix}.ffn1"), y)?.relu();
    let h = linear(tape, store, &format!("{prefix}.ffn2"), h)?;
    Ok(y.add(h)?.layer_norm())
}

fn head_range(cfg: &Config, h: usize) -> (usize, usize) {
    let dh = cfg.d_model / cfg.heads;
    (h * dh, (h + 1) * dh)
}

fn heads_of<'t>(x: Var<'t>, cfg: &Config) -> Result<Vec<Var<'t>>> {
    if cfg.heads == 1 {
        return Ok(vec![x]);
    }
    (0..cfg.heads)
        .map(|h| {
            let (a, b) = head_range(cfg, h);
            x.slice_cols(a, b)
        })
        .collect()
}

pub struct SelfAttentionOutput<'t> {
    /// Layer output after the residual and feed-forward block.
    pub output: Var<'t>,
    /// `Σ_j a_ij x_j W^V` before the residual.
    pub attended: Var<'t>,
    /// Pre-softmax scores, one `L×L` matrix per head.
    pub scores: Vec<Var<'t>>,
    /// Row-stochastic attention, one per head.
    pub attention: Vec<Var<'t>>,
    /// Skeleton-aware positional encoding `E′` (`L×d`).
    pub positional: Var<'t>,
}

/// Skeleton-aware geometric self-attention.
///
/// The structure terms `q_i·(r_ij W)` are evaluated as `(q_i Wᵀ)·r_ij` on the
/// unprojected tables, so no `L²×d` projected tensor is ever formed.
pub fn self_attention_layer<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    geom: &GeometryVars<'t>,
    store: &ParameterStore,
    prefix: &str,
    cfg: &Config,
) -> Result<SelfAttentionOutput<'t>> {
    let p = |name: &str| tape.param(store, &format!("{prefix}.{name}"));
    let embed = |name: &str| tape.param(store, &format!("encoder.embed.{name}"));
    let (wp, ws) = (p("wp")?, p("ws")?);
    // r W^P = D (W^D W^P) + A (W^A W^P), likewise for W^S.
    let folds = [
        (embed("distance")?.matmul(wp)?, geom.distance),
        (embed("angle")?.matmul(wp)?, geom.angle),
        (embed("skeleton_distance")?.matmul(ws)?, geom.skeleton_distance),
        (embed("skeleton_angle")?.matmul(ws)?, geom.skeleton_angle),
    ];
    let q = x.matmul(p("wq")?)?;
    let k = x.matmul(p("wk")?)?;
    let v = x.matmul(p("wv")?)?;
    let (qh, kh, vh) = (heads_of(q, cfg)?, heads_of(k, cfg)?, heads_of(v, cfg)?);
    let scale = 1.0 / ((cfg.d_model / cfg.heads) as f64).sqrt();
    let mut scores = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    let mut outputs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (a, b) = head_range(cfg, h);
        let mut e = qh[h].matmul(kh[h].transpose())?;
        for (m, table) in &folds {
            let mh = if cfg.heads == 1 { *m } else { m.slice_cols(a, b)? };
            e = e.add(qh[h].matmul(mh.transpose())?.pair_scores(*table, geom.len)?)?;
        }
        let e = e.scale(scale);
        let attn = e.row_softmax();
        outputs.push(attn.matmul(vh[h])?);
        scores.push(e);
        attention.push(attn);
    }
    let attended = if cfg.heads == 1 { outputs[0] } else { Var::concat_cols(&outputs)? };
    let mut mean_attn = attention[0];
    for a in &attention[1..] {
        mean_attn = mean_attn.add(*a)?;
    }
    if cfg.heads > 1 {
        mean_attn = mean_attn.scale(1.0 / cfg.heads as f64);
    }
    let positional = mean_attn
        .pair_weighted_sum(geom.skeleton_distance)?
        .matmul(embed("skeleton_distance")?)?
        .add(mean_attn.pair_weighted_sum(geom.skeleton_angle)?.matmul(embed("skeleton_angle")?)?)?;
    let output = residual_block(tape, store, prefix, x, attended)?;
    Ok(SelfAttentionOutput {
        output,
        attended,
        scores,
        attention,
        positional,
    })
}

pub struct CrossAttentionOutput<'t> {
    pub output: Var<'t>,
    /// `Σ_j a_ij x′_j W^V` before the residual.
    pub attended: Var<'t>,
    pub attention: Vec<Var<'t>>,
}

/// One direction of skeleton-aware cross-attention: `x` attends to `other`.
/// Only the first `key_count` rows of `other` serve as keys and values.
#[allow(clippy::too_many_arguments)]
fn cross_direction<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    x_prime: Var<'t>,
    other_prime: Var<'t>,
    key_count: usize,
    store: &ParameterStore,
    prefix: &str,
    cfg: &Config,
) -> Result<CrossAttentionOutput<'t>> {
    let p = |name: &str| tape.param(store, &format!("{prefix}.{name}"));
    let keys = if key_count < other_prime.rows() {
        other_prime.gather_rows(&(0..key_count).collect::<Vec<_>>())?
    } else {
        other_prime
    };
    let q = x_prime.matmul(p("wq")?)?;
    let k = keys.matmul(p("wk")?)?;
    let v = keys.matmul(p("wv")?)?;
    let (qh, kh, vh) = (heads_of(q, cfg)?, heads_of(k, cfg)?, heads_of(v, cfg)?);
    let scale = 1.0 / ((cfg.d_model / cfg.heads) as f64).sqrt();
    let mut attention = Vec::with_capacity(cfg.heads);
    let mut outputs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let attn = qh[h].matmul(kh[h].transpose())?.scale(scale).row_softmax();
        outputs.push(attn.matmul(vh[h])?);
        attention.push(attn);
    }
    let attended = if cfg.heads == 1 { outputs[0] } else { Var::concat_cols(&outputs)? };
    let output = residual_block(tape, store, prefix, x, attended)?;
    Ok(CrossAttentionOutput {
        output,
        attended,
        attention,
    })
}

/// Cross-attention in both directions with shared weights. Features are
/// offset by their positional encodings `E′` before projection; the residual
/// uses the raw features. `keys_p` / `keys_q` bound the key rows of each side.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_layer<'t>(
    tape: &'t Tape,
    x_p: Var<'t>,
    pos_p: Var<'t>,
    keys_p: usize,
    x_q: Var<'t>,
    pos_q: Var<'t>,
    keys_q: usize,
    store: &ParameterStore,
    prefix: &str,
    cfg: &Config,
) -> Result<(CrossAttentionOutput<'t>, CrossAttentionOutput<'t>)> {
    let xp = x_p.add(pos_p)?;
    let xq = x_q.add(pos_q)?;
    let out_p = cross_direction(tape, x_p, xp, xq, keys_q, store, prefix, cfg)?;
    let out_q = cross_direction(tape, x_q, xq, xp, keys_p, store, prefix, cfg)?;
    Ok((out_p, out_q))
}
