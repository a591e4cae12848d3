//! Two-stage training, prediction, evaluation, robustness perturbations and
//! checkpointing.

mod eval;
mod model;
mod perturb;
mod train;

pub use eval::{auc, evaluate, fake_probability, metrics_from_scores, predict, ClipScore, MetricsReport, Prediction};
pub use model::{
    batch_loss, encode_segment, segment_logits, usable_slices, BatchLoss, LossWeights, Model, ModelConfig, ModelParams,
    SegmentInput, SegmentVars, CLASSIFIER_PREFIX, FUSION_PREFIXES,
};
pub use perturb::{
    blur_sigma, block_count, compress_step, contrast_factor, noise_sigma, perturb, pixelate_block, saturation_factor,
    PerturbKind, LEVELS,
};
pub use train::{cosine_factor, finetune, pretrain, AdamW, EpochLoss, FusionTier, TrainConfig, TrainHistory};

use crate::clip::ClipTriplet;
use crate::error::{Error, Result};
use crate::gradcheck::{check_params, GradCheckReport};
use crate::params::{Mode, ParamId};

/// Central-difference check of the full pretraining loss on a micro-batch
/// of every usable segment of the first two clips that have one.
pub fn grad_check_pretrain(
    params: &ModelParams,
    clips: &[ClipTriplet],
    per_tensor: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut segs = Vec::new();
    let mut used = 0;
    for c in clips {
        let slices = usable_slices(c)?;
        if slices.is_empty() {
            continue;
        }
        segs.extend(slices.iter().map(|sl| SegmentInput::from_slice(c, sl, params.config())));
        used += 1;
        if used == 2 {
            break;
        }
    }
    if used < 2 {
        return Err(Error::EmptyInput("gradient check needs two clips with usable segments".into()));
    }
    let ids: Vec<ParamId> = params
        .store
        .learnable_ids()
        .filter(|&id| !params.store.name(id).starts_with(CLASSIFIER_PREFIX))
        .collect();
    let all: Vec<usize> = (0..segs.len()).collect();
    check_params(&params.store, &ids, per_tensor, step, Mode::Train, seed, |s| {
        let vars = segs.iter().map(|g| encode_segment(s, &params.model, g)).collect::<Result<Vec<_>>>()?;
        Ok(batch_loss(s, &params.model, &vars, &all, LossWeights::default(), None)?.total)
    })
}
