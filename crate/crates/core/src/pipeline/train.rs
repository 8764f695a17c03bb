use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::loss::{overlap_circle_loss, patch_gt_matches, patch_overlaps, point_matching_loss};
use super::{forward, init_model, preprocess, Forward, TrainSample, SLACK_PARAM};
use crate::cloud::RigidTransform;
use crate::config::{Config, LossSchedule};
use crate::error::{Error, Result};
use crate::matching::{coarse_match, log_sinkhorn, CorrespondenceKind};
use crate::skeleton::skeleton_loss;
use crate::tensor::{adam_step, AdamState, ParameterStore, Tape, Tensor, Var};

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParameterStore,
    pub adam: AdamState,
    pub rng: Xoshiro256PlusPlus,
    /// Completed epochs.
    pub epoch: u32,
}

impl TrainState {
    pub fn new(cfg: &Config) -> Result<Self> {
        Ok(Self {
            params: init_model(cfg)?,
            adam: AdamState::new(cfg.lr, cfg.weight_decay),
            rng: Xoshiro256PlusPlus::seed_from_u64(cfg.seed.wrapping_add(1)),
            epoch: 0,
        })
    }
}

/// Means over the samples that were not skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochMetrics {
    pub loss: f64,
    pub circle: f64,
    pub matching: f64,
    pub skeleton: f64,
    /// Fraction of superpoint matches within `coarse_ir_radius` under ground truth.
    pub coarse_ir: f64,
    pub samples: usize,
    pub skipped: usize,
}

struct SampleLosses<'t> {
    circle: Var<'t>,
    matching: Var<'t>,
    skeleton: Var<'t>,
    coarse_ir: f64,
}

fn matching_term<'t>(
    tape: &'t Tape,
    fw: &Forward<'t>,
    overlaps: &Tensor,
    gt: &RigidTransform,
    store: &ParameterStore,
    cfg: &Config,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<Var<'t>> {
    let m = overlaps.cols();
    let candidates: Vec<(usize, usize)> = overlaps
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &o)| o > 0.0)
        .map(|(k, _)| (k / m, k % m))
        .collect();
    if candidates.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let chosen: Vec<usize> = if candidates.len() > cfg.matching_pairs {
        let mut idx = sample(rng, candidates.len(), cfg.matching_pairs).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..candidates.len()).collect()
    };
    let slack = tape.param(store, SLACK_PARAM)?;
    let f_src = fw.src.dense_features();
    let f_tgt = fw.tgt.dense_features();
    let scale = 1.0 / (f_src.cols() as f64).sqrt();
    let mut terms = Vec::with_capacity(chosen.len());
    for k in chosen {
        let (i, j) = candidates[k];
        let (ps, qs) = (&fw.src.patches.members[i], &fw.tgt.patches.members[j]);
        let scores = f_src.gather_rows(ps)?.matmul(f_tgt.gather_rows(qs)?.transpose())?.scale(scale);
        let log_p = log_sinkhorn(scores, slack, cfg.sinkhorn_iters)?;
        let gt_mask = patch_gt_matches(fw.src.dense_points(), fw.tgt.dense_points(), ps, qs, gt, cfg.tau_a);
        terms.push(point_matching_loss(log_p, &gt_mask)?);
    }
    Ok(Var::concat_rows(&terms)?.mean())
}

fn sample_losses<'t>(
    tape: &'t Tape,
    sample: &TrainSample,
    store: &ParameterStore,
    cfg: &Config,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<SampleLosses<'t>> {
    let src = preprocess(&sample.source, cfg)?;
    let tgt = preprocess(&sample.target, cfg)?;
    let fw = forward(tape, &src, &tgt, store, cfg)?;
    let overlaps = patch_overlaps(&fw.src, &fw.tgt, &sample.gt, cfg.tau_a);

    let h_src = fw.src_features.superpoints;
    let h_tgt = fw.tgt_features.superpoints;
    let coarse = coarse_match(&h_src.value(), &h_tgt.value(), cfg.coarse_cap, CorrespondenceKind::Superpoint);
    let coarse_ir = if coarse.is_empty() {
        0.0
    } else {
        let (sp, tp) = (fw.src.superpoints(), fw.tgt.superpoints());
        let hits = coarse
            .iter()
            .filter(|c| (sample.gt.apply(&sp.point(c.src)) - tp.point(c.tgt)).norm() < cfg.coarse_ir_radius)
            .count();
        hits as f64 / coarse.len() as f64
    };

    let circle = overlap_circle_loss(h_src, h_tgt, &overlaps, cfg)?;
    let matching = matching_term(tape, &fw, &overlaps, &sample.gt, store, cfg, rng)?;
    let skel_src = skeleton_loss(fw.src.superpoints(), &fw.src_skeleton, cfg, rng)?;
    let skel_tgt = skeleton_loss(fw.tgt.superpoints(), &fw.tgt_skeleton, cfg, rng)?;
    Ok(SampleLosses {
        circle,
        matching,
        skeleton: skel_src.total.add(skel_tgt.total)?,
        coarse_ir,
    })
}

/// One pass over `dataset` with a batch size of one.
///
/// Each sample contributes the registration loss (circle plus point
/// matching) and the skeleton loss of both clouds. Under the joint schedule
/// both are minimised in a single step; under the alternate schedule even
/// samples step on the registration loss and odd ones on the skeleton loss.
/// Samples with a non-finite loss are skipped; skipping more than half of
/// the epoch is an error.
pub fn train_epoch(dataset: &[TrainSample], state: &mut TrainState, cfg: &Config) -> Result<EpochMetrics> {
    if dataset.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let mut sums = EpochMetrics::default();
    for (k, sample) in dataset.iter().enumerate() {
        let tape = Tape::new();
        let losses = sample_losses(&tape, sample, &state.params, cfg, &mut state.rng)?;
        let registration = losses.circle.add(losses.matching)?;
        let objective = match (cfg.registration_loss, cfg.loss_schedule) {
            (false, _) => losses.skeleton,
            (true, LossSchedule::Joint) => registration.add(losses.skeleton)?,
            (true, LossSchedule::Alternate) if k % 2 == 0 => registration,
            (true, LossSchedule::Alternate) => losses.skeleton,
        };
        let total = registration.item() + losses.skeleton.item();
        if !total.is_finite() || !objective.item().is_finite() {
            sums.skipped += 1;
            continue;
        }
        let mut grads = tape.backward(objective)?.into_params();
        if grads.values().any(|g| !g.is_finite()) {
            sums.skipped += 1;
            continue;
        }
        for (path, value) in state.params.iter() {
            grads
                .entry(path.to_string())
                .or_insert_with(|| Tensor::zeros(value.rows(), value.cols()));
        }
        state.params.zero_grads();
        state.params.accumulate_grads(&grads)?;
        adam_step(&mut state.params, &mut state.adam)?;

        sums.loss += total;
        sums.circle += losses.circle.item();
        sums.matching += losses.matching.item();
        sums.skeleton += losses.skeleton.item();
        sums.coarse_ir += losses.coarse_ir;
        sums.samples += 1;
    }
    if sums.skipped * 2 > dataset.len() {
        return Err(Error::Training(format!(
            "{} of {} samples had non-finite losses",
            sums.skipped,
            dataset.len()
        )));
    }
    let n = sums.samples.max(1) as f64;
    state.epoch += 1;
    Ok(EpochMetrics {
        loss: sums.loss / n,
        circle: sums.circle / n,
        matching: sums.matching / n,
        skeleton: sums.skeleton / n,
        coarse_ir: sums.coarse_ir / n,
        ..sums
    })
}
