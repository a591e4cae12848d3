//! Self-supervised pretraining and supervised finetuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::fake_probability;
use super::model::{batch_loss, encode_segment, usable_slices, LossWeights, Model, ModelParams, SegmentInput, CLASSIFIER_PREFIX, FUSION_PREFIXES};
use crate::autograd::Mat;
use crate::clip::{ClipTriplet, Label};
use crate::error::{Error, Result};
use crate::params::{Mode, ParamId, ParamKind, ParamStore, Session};
use crate::screening::SegmentSlice;
use crate::synthcorpus::{sha256_hex, splitmix64};

/// Learning-rate tier of the fusion module during finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionTier {
    /// Pretrained, so it shares the backbone rate.
    Shared,
    /// Trained at the rate of finetune-only modules. The classifier reads
    /// only fused features, so this is the default.
    #[default]
    New,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Rate of finetune-only modules.
    pub lr_new: f64,
    /// Finetune rate of modules shared with pretraining.
    pub lr_shared: f64,
    /// Rate of every module during pretraining.
    pub lr_pretrain: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Non-critical segments drawn per clip and step.
    pub segments_per_clip: usize,
    /// Whether fake clips enter the contrastive and alignment terms while
    /// finetuning. Off by default: aligning a fake clip's streams works
    /// against the classifier that has to tell them apart.
    pub contrastive_on_fakes: bool,
    pub fusion_tier: FusionTier,
    pub weights: LossWeights,
    /// Weight `w` of the cross-entropy term.
    pub ce_weight: f64,
    /// Clips in the fixed probe set used to track the pretraining loss.
    pub probe_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_new: 1e-3,
            lr_shared: 5e-6,
            lr_pretrain: 1e-3,
            weight_decay: 1e-2,
            batch: 16,
            epochs: 10,
            seed: 7,
            segments_per_clip: 2,
            contrastive_on_fakes: false,
            fusion_tier: FusionTier::New,
            weights: LossWeights::default(),
            ce_weight: 1.0,
            probe_clips: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("lr_new", self.lr_new), ("lr_shared", self.lr_shared), ("lr_pretrain", self.lr_pretrain)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{what} must be a non-negative rate, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch < 2 {
            return Err(Error::Config(format!("contrastive losses need batch ≥ 2, got {}", self.batch)));
        }
        if self.segments_per_clip == 0 {
            return Err(Error::Config("segments_per_clip must be at least 1".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment optimizer with decoupled weight decay; decay applies to
/// [`ParamKind::Weight`] tensors only.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    moments: Vec<Option<(Mat, Mat)>>,
    steps: Vec<u32>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: Vec<(ParamId, Mat)>, lr: impl Fn(ParamId) -> f64, weight_decay: f64) {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
            self.steps.resize(store.len(), 0);
        }
        for (id, g) in grads {
            let rate = lr(id);
            let decay = if store.kind(id) == ParamKind::Weight { weight_decay } else { 0.0 };
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (Mat::zeros(g.dim()), Mat::zeros(g.dim())));
            self.steps[id.0] += 1;
            let t = self.steps[id.0] as i32;
            m.zip_mut_with(&g, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
            v.zip_mut_with(&g, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
            if rate == 0.0 {
                continue;
            }
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let update = (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                *p -= rate * (update + decay * *p);
            });
        }
    }
}

/// Cosine decay from 1 at step 0 towards 0 at `total`.
pub fn cosine_factor(step: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub ec: f64,
    pub info: f64,
    pub cor: f64,
    pub ce: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss per epoch.
    pub epochs: Vec<EpochLoss>,
    /// Pretraining loss on the fixed probe set: before training, then after
    /// every epoch.
    pub probe: Vec<f64>,
    /// Clips without a usable non-critical segment.
    pub skipped_clips: usize,
    pub steps: usize,
    /// Training accuracy of the clip-level prediction per epoch
    /// (finetuning only).
    pub train_acc: Vec<f64>,
}

impl TrainHistory {
    /// Last probe loss over the first.
    pub fn probe_ratio(&self) -> Option<f64> {
        match (self.probe.first(), self.probe.last()) {
            (Some(&a), Some(&b)) if self.probe.len() >= 2 && a > 0.0 => Some(b / a),
            _ => None,
        }
    }
}

struct Prepared<'a> {
    clips: &'a [ClipTriplet],
    slices: Vec<Vec<SegmentSlice>>,
    usable: Vec<usize>,
}

fn prepare(clips: &[ClipTriplet]) -> Result<Prepared<'_>> {
    let mut slices = Vec::with_capacity(clips.len());
    for c in clips {
        c.validate()?;
        slices.push(usable_slices(c)?);
    }
    let usable: Vec<usize> = (0..clips.len()).filter(|&i| !slices[i].is_empty()).collect();
    let skipped = clips.len() - usable.len();
    if skipped > 0 {
        log::warn!("{skipped} clip(s) have no usable non-critical segment and are skipped");
    }
    Ok(Prepared { clips, slices, usable })
}

/// A step's worth of segments with their clip grouping.
struct Batch {
    segs: Vec<SegmentInput>,
    groups: Vec<Vec<usize>>,
    targets: Vec<f64>,
    labels: Vec<Label>,
}

fn make_batch(prep: &Prepared, model: &Model, clip_ids: &[usize], per_clip: usize, rng: Option<&mut ChaCha8Rng>) -> Batch {
    let mut rng = rng;
    let mut b = Batch {
        segs: Vec::new(),
        groups: Vec::new(),
        targets: Vec::new(),
        labels: Vec::new(),
    };
    for &ci in clip_ids {
        let clip = &prep.clips[ci];
        let slices = &prep.slices[ci];
        let mut picks: Vec<usize> = (0..slices.len()).collect();
        if let Some(r) = rng.as_deref_mut() {
            picks.shuffle(r);
        }
        picks.truncate(per_clip);
        picks.sort_unstable();
        let mut g = Vec::new();
        for p in picks {
            g.push(b.segs.len());
            b.segs.push(SegmentInput::from_slice(clip, &slices[p], &model.config));
        }
        b.groups.push(g);
        b.targets.push(clip.label.target());
        b.labels.push(clip.label);
    }
    b
}

struct StepOutcome {
    loss: EpochLoss,
    /// Clip-level probabilities of fake, when cross-entropy is active.
    probs: Vec<f64>,
}

/// Forward + backward on one batch. Returns the loss and, if `apply`, the
/// gradients and running-statistic updates.
#[allow(clippy::type_complexity)]
fn run_batch(
    params: &ModelParams,
    batch: &Batch,
    cfg: &TrainConfig,
    with_ce: bool,
    apply: bool,
) -> Result<(StepOutcome, Vec<(ParamId, Mat)>, Vec<(ParamId, Mat)>)> {
    let model = &params.model;
    let mut s = Session::new(&params.store, Mode::Train);
    let vars = batch
        .segs
        .iter()
        .map(|seg| encode_segment(&mut s, model, seg))
        .collect::<Result<Vec<_>>>()?;
    let contrastive: Vec<usize> = if with_ce && !cfg.contrastive_on_fakes {
        batch
            .groups
            .iter()
            .zip(&batch.labels)
            .filter(|(_, &l)| l == Label::Real)
            .flat_map(|(g, _)| g.iter().copied())
            .collect()
    } else {
        (0..batch.segs.len()).collect()
    };
    let ce = with_ce.then_some((batch.groups.as_slice(), batch.targets.as_slice(), cfg.ce_weight));
    let l = batch_loss(&mut s, model, &vars, &contrastive, cfg.weights, ce)?;
    let get = |v: Option<crate::autograd::Var>| v.map_or(0.0, |v| s.graph.scalar(v));
    let loss = EpochLoss {
        ec: get(l.ec),
        info: get(l.info),
        cor: get(l.cor),
        ce: get(l.ce),
        total: s.graph.scalar(l.total),
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", loss.total)));
    }
    let probs = match l.clip_logits {
        Some(v) => s.value(v).rows().into_iter().map(|r| fake_probability([r[0], r[1]])).collect(),
        None => Vec::new(),
    };
    let (grads, running) = if apply {
        let mut g = s.graph.backward(l.total);
        let grads = s.param_grads(&mut g);
        (grads, s.take_running_updates())
    } else {
        (Vec::new(), Vec::new())
    };
    Ok((StepOutcome { loss, probs }, grads, running))
}

fn add_loss(acc: &mut EpochLoss, l: &EpochLoss) {
    acc.ec += l.ec;
    acc.info += l.info;
    acc.cor += l.cor;
    acc.ce += l.ce;
    acc.total += l.total;
}

fn scale_loss(acc: &mut EpochLoss, k: f64) {
    acc.ec *= k;
    acc.info *= k;
    acc.cor *= k;
    acc.ce *= k;
    acc.total *= k;
}

/// Mean pretraining loss over the fixed probe set, without updates.
fn probe_loss(params: &ModelParams, prep: &Prepared, cfg: &TrainConfig) -> Result<f64> {
    let n = cfg.probe_clips.min(prep.usable.len());
    let ids = &prep.usable[..n];
    let mut total = 0.0;
    let mut count = 0;
    for chunk in ids.chunks(cfg.batch) {
        let b = make_batch(prep, &params.model, chunk, cfg.segments_per_clip, None);
        if b.segs.len() < 2 {
            continue;
        }
        let (out, _, _) = run_batch(params, &b, cfg, false, false)?;
        total += out.loss.total;
        count += 1;
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

fn epoch_rng(seed: u64, stage: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ stage) ^ epoch as u64))
}

fn train_loop(
    params: &mut ModelParams,
    prep: &Prepared,
    cfg: &TrainConfig,
    with_ce: bool,
    stage: u64,
    lr_of: &dyn Fn(&ParamStore, ParamId) -> f64,
) -> Result<TrainHistory> {
    let mut hist = TrainHistory {
        skipped_clips: prep.clips.len() - prep.usable.len(),
        ..TrainHistory::default()
    };
    if !with_ce {
        hist.probe.push(probe_loss(params, prep, cfg)?);
    }
    let steps_per_epoch = prep.usable.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let rates: Vec<f64> = params.store.ids().map(|id| lr_of(&params.store, id)).collect();
    let mut opt = AdamW::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, stage, epoch);
        let mut order = prep.usable.clone();
        order.shuffle(&mut rng);
        let mut acc = EpochLoss::default();
        let mut batches = 0;
        let (mut correct, mut seen) = (0usize, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let b = make_batch(prep, &params.model, chunk, cfg.segments_per_clip, Some(&mut rng));
            if b.segs.len() < 2 && !with_ce {
                continue;
            }
            let (out, grads, running) = run_batch(params, &b, cfg, with_ce, true)?;
            let f = cosine_factor(step, total_steps);
            opt.step(&mut params.store, grads, |id| f * rates[id.0], cfg.weight_decay);
            for (id, v) in running {
                params.store.set(id, v);
            }
            add_loss(&mut acc, &out.loss);
            for (p, &t) in out.probs.iter().zip(&b.targets) {
                correct += usize::from((*p > 0.5) == (t == 1.0));
                seen += 1;
            }
            batches += 1;
            step += 1;
        }
        if batches > 0 {
            scale_loss(&mut acc, 1.0 / batches as f64);
        }
        log::info!("epoch {epoch}: loss {:.4} (ec {:.4} info {:.4} cor {:.4} ce {:.4})", acc.total, acc.ec, acc.info, acc.cor, acc.ce);
        hist.epochs.push(acc);
        if with_ce {
            hist.train_acc.push(if seen == 0 { 0.0 } else { correct as f64 / seen as f64 });
        } else {
            hist.probe.push(probe_loss(params, prep, cfg)?);
        }
    }
    hist.steps = step;
    params.store.check_finite()?;
    Ok(hist)
}

/// Self-supervised pretraining on real clips.
pub fn pretrain(params: &mut ModelParams, clips: &[ClipTriplet], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if let Some(c) = clips.iter().find(|c| c.label != Label::Real) {
        return Err(Error::Validation(format!("pretraining corpus contains fake clip `{}`", c.clip_id)));
    }
    let prep = prepare(clips)?;
    if prep.usable.len() < 2 {
        return Err(Error::EmptyInput(format!("pretraining needs at least 2 usable clips, got {}", prep.usable.len())));
    }
    let lr = cfg.lr_pretrain;
    train_loop(params, &prep, cfg, false, 1, &move |_, _| lr)
}

/// Supervised finetuning with the two-tier learning rate.
pub fn finetune(params: &mut ModelParams, clips: &[ClipTriplet], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let has = |l| clips.iter().any(|c| c.label == l);
    if !has(Label::Real) || !has(Label::Fake) {
        return Err(Error::Validation("finetuning corpus needs both real and fake clips".into()));
    }
    let prep = prepare(clips)?;
    let (lr_new, lr_shared, tier) = (cfg.lr_new, cfg.lr_shared, cfg.fusion_tier);
    let lr_of = move |store: &ParamStore, id: ParamId| {
        let name = store.name(id);
        let new = name.starts_with(CLASSIFIER_PREFIX)
            || (tier == FusionTier::New && FUSION_PREFIXES.iter().any(|p| name.starts_with(p)));
        if new {
            lr_new
        } else {
            lr_shared
        }
    };
    train_loop(params, &prep, cfg, true, 2, &lr_of)
}
