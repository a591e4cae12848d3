//! The full detector: three tokenizer+encoder streams, projection heads,
//! fusion and the classifier, plus the per-segment forward pass shared by
//! training and inference.

use std::path::Path;

use ndarray::{s, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Var};
use crate::clip::ClipTriplet;
use crate::common_space::{PfAnchor, ProjectionHeads};
use crate::encoder::{EncoderConfig, Layout, StreamEncoder};
use crate::error::{Error, Result};
use crate::layers::{adaptive_pool_matrix, Linear};
use crate::objectives::{cgra_graph, ec_loss_graph, infonce_graph, EcOptions};
use crate::params::{ParamStore, Session};
use crate::pvam::{align_graph, AlignmentAdapter, CafmParams};
use crate::screening::{filter_noncritical, slice_clip, SegmentSlice};
use crate::synthcorpus::sha256_hex;
use crate::tokenizer::{Modality, PatchSpec, StreamTokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch: PatchSpec,
    pub phoneme: EncoderConfig,
    pub viseme: EncoderConfig,
    pub face: EncoderConfig,
    /// Common-space width.
    pub d_c: usize,
    pub pf_anchor: PfAnchor,
    /// Sequence length both streams are pooled to before fusion.
    pub fusion_len: usize,
    /// Hidden width of the fusion branches.
    pub fusion_k: usize,
    /// Temperature of the consistency loss.
    pub tau: f64,
    /// Temperature of InfoNCE.
    pub tau_info: f64,
    /// Off-diagonal weight of the correlation loss.
    pub lambda: f64,
    pub ec: EcOptions,
    /// Seed of the initial weights.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = 64;
        Self {
            patch: PatchSpec::default(),
            phoneme: EncoderConfig::default(),
            viseme: EncoderConfig::default(),
            face: EncoderConfig::default(),
            d_c: 128,
            pf_anchor: PfAnchor::Phoneme,
            fusion_len: 4,
            fusion_k: d,
            tau: 0.07,
            tau_info: 0.07,
            lambda: 5e-3,
            ec: EcOptions::default(),
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        for (what, c) in [("phoneme", &self.phoneme), ("viseme", &self.viseme), ("face", &self.face)] {
            c.validate()?;
            if c.d != self.patch.d {
                return Err(Error::Config(format!(
                    "{what} encoder width {} differs from token width {}",
                    c.d, self.patch.d
                )));
            }
        }
        if self.d_c == 0 || self.fusion_len == 0 || self.fusion_k == 0 {
            return Err(Error::Config("d_c, fusion_len and fusion_k must be positive".into()));
        }
        for (what, t) in [("tau", self.tau), ("tau_info", self.tau_info), ("lambda", self.lambda)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{what} must be positive, got {t}")));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Parameter handles of every component.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_p: StreamTokenizer,
    pub tok_v: StreamTokenizer,
    pub tok_f: StreamTokenizer,
    pub enc_p: StreamEncoder,
    pub enc_v: StreamEncoder,
    pub enc_f: StreamEncoder,
    pub heads: ProjectionHeads,
    pub cafm: CafmParams,
    pub adapter: Option<AlignmentAdapter>,
    /// `concat(face, fused) → (real, fake)` logits; zero at initialization.
    pub classifier: Linear,
}

pub const CLASSIFIER_PREFIX: &str = "classifier.";
pub const FUSION_PREFIXES: [&str; 2] = ["cafm.", "align."];

impl Model {
    pub fn build(config: ModelConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.patch.d;
        let audio_len = config.patch.audio_patch;
        let voxels = config.patch.voxels_per_tubelet();
        let tok_p = StreamTokenizer::new(store, &mut rng, "tok.phoneme", Modality::Phoneme, audio_len, d, config.phoneme.max_tokens);
        let tok_v = StreamTokenizer::new(store, &mut rng, "tok.viseme", Modality::Viseme, voxels, d, config.viseme.max_tokens);
        let tok_f = StreamTokenizer::new(store, &mut rng, "tok.face", Modality::Face, voxels, d, config.face.max_tokens);
        let enc_p = StreamEncoder::new(store, &mut rng, "enc.phoneme", config.phoneme.clone(), false)?;
        let enc_v = StreamEncoder::new(store, &mut rng, "enc.viseme", config.viseme.clone(), true)?;
        let enc_f = StreamEncoder::new(store, &mut rng, "enc.face", config.face.clone(), true)?;
        let heads = ProjectionHeads::new(store, &mut rng, "heads", d, config.d_c, config.pf_anchor);
        let cafm = CafmParams::new(store, &mut rng, "cafm", d, d, config.fusion_k, config.fusion_len);
        let adapter = AlignmentAdapter::new(store, &mut rng, "align", d, d);
        let classifier = Linear::zeroed(store, "classifier", 3 * d, 2, true);
        Ok(Self {
            config,
            tok_p,
            tok_v,
            tok_f,
            enc_p,
            enc_v,
            enc_f,
            heads,
            cafm,
            adapter,
            classifier,
        })
    }
}

/// Versioned archive of every tensor together with the model layout.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub model: Model,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ArchiveMeta {
    format: String,
    config: ModelConfig,
}

const META_FORMAT: &str = "avforensics-model-1";

impl ModelParams {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Model::build(config, &mut store)?;
        let meta = ArchiveMeta {
            format: META_FORMAT.into(),
            config: model.config.clone(),
        };
        store.set_metadata(serde_json::to_string(&meta)?);
        Ok(Self { model, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.store.to_bytes()
    }

    /// Rebuilds the layout from the archived config and checks that the
    /// archive holds exactly the expected tensors.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let archive = ParamStore::from_bytes(bytes)?;
        let meta: ArchiveMeta = serde_json::from_str(archive.metadata())
            .map_err(|e| Error::Decode(format!("archive metadata: {e}")))?;
        if meta.format != META_FORMAT {
            return Err(Error::Decode(format!("archive format `{}`, expected `{META_FORMAT}`", meta.format)));
        }
        let mut p = Self::init(meta.config)?;
        p.store.load_values_from(&archive)?;
        if archive.len() != p.store.len() {
            let extra = archive
                .ids()
                .map(|id| archive.name(id))
                .find(|n| p.store.id(n).is_none())
                .unwrap_or("?");
            return Err(Error::Decode(format!("archive holds unexpected tensor `{extra}`")));
        }
        for id in archive.ids() {
            let own = p.store.id(archive.name(id)).expect("checked above");
            if archive.kind(id) != p.store.kind(own) {
                return Err(Error::Decode(format!("tensor `{}` has the wrong kind", archive.name(id))));
            }
        }
        p.store.check_finite()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

/// Raw inputs of one non-critical segment, scaled for the tokenizers.
#[derive(Debug, Clone)]
pub struct SegmentInput {
    pub phoneme: String,
    pub audio: Vec<f64>,
    /// `T×H×W×3` in `[-1, 1]`.
    pub viseme: Array4<f64>,
    pub face: Array4<f64>,
}

/// Non-critical segments of a clip that have both samples and frames.
pub fn usable_slices(clip: &ClipTriplet) -> Result<Vec<SegmentSlice>> {
    slice_clip(clip, &filter_noncritical(&clip.timeline))
}

fn to_unit(frames: ndarray::ArrayView4<u8>) -> Array4<f64> {
    frames.mapv(|b| b as f64 / 127.5 - 1.0)
}

impl SegmentInput {
    /// Extracts the segment, keeping the leading part that fits the token
    /// capacity of each stream.
    pub fn from_slice(clip: &ClipTriplet, slice: &SegmentSlice, config: &ModelConfig) -> Self {
        let p = &config.patch;
        let max_samples = config.phoneme.max_tokens * p.audio_patch;
        let a = slice.audio_span;
        let audio = clip.waveform[a.start..a.end.min(a.start + max_samples)]
            .iter()
            .map(|&x| x as f64)
            .collect();
        let (t, h, w) = p.tubelet;
        let frames = |max_tokens: usize, stack: &Array4<u8>| {
            let (_, height, width, _) = stack.dim();
            let per_slot = height.div_ceil(h) * width.div_ceil(w);
            let max_frames = (max_tokens / per_slot).max(1) * t;
            let f = slice.frame_span;
            to_unit(stack.slice(s![f.start..f.end.min(f.start + max_frames), .., .., ..]))
        };
        Self {
            phoneme: slice.segment.label.clone(),
            audio,
            viseme: frames(config.viseme.max_tokens, &clip.viseme),
            face: frames(config.face.max_tokens, &clip.face),
        }
    }
}

/// Per-segment `1×w` rows of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SegmentVars {
    /// Pooled phoneme encoder output, `1×d`.
    pub phon: Var,
    pub vis: Var,
    pub face: Var,
    /// Sequence means of the attended phoneme and viseme maps, `1×d`.
    pub att_p: Var,
    pub att_v: Var,
    /// Classifier input `concat(face, att_p, att_v)`, `1×3d`.
    pub features: Var,
}

/// Encodes one segment through all three streams and the fusion module.
pub fn encode_segment(s: &mut Session, model: &Model, seg: &SegmentInput) -> Result<SegmentVars> {
    let cfg = &model.config;
    let xp = model.tok_p.forward_audio(s, &seg.audio, cfg.patch.audio_patch)?;
    let n_a = s.graph.shape(xp).0;
    let hp = model.enc_p.forward(s, xp, Layout::Line(n_a))?;
    let (xv, gv) = model.tok_v.forward_video(s, seg.viseme.view(), cfg.patch.tubelet)?;
    let hv = model.enc_v.forward(s, xv, Layout::Grid(gv))?;
    let (xf, gf) = model.tok_f.forward_video(s, seg.face.view(), cfg.patch.tubelet)?;
    let hf = model.enc_f.forward(s, xf, Layout::Grid(gf))?;

    let phon = s.graph.mean_rows(hp);
    let vis = s.graph.mean_rows(hv);
    let face = s.graph.mean_rows(hf);

    // pool both sequences to the fusion length; fusion wants features on rows
    let pool_a = s.constant(adaptive_pool_matrix(n_a, cfg.fusion_len));
    let pool_v = s.constant(adaptive_pool_matrix(gv.len(), cfg.fusion_len));
    let fp = s.graph.matmul(pool_a, hp);
    let fv = s.graph.matmul(pool_v, hv);
    let fp = s.graph.transpose(fp);
    let fv = s.graph.transpose(fv);
    let (ap, av) = model.cafm.forward(s, fp, fv)?;
    let ap = s.graph.sum_cols(ap);
    let ap = s.graph.scale(ap, 1.0 / cfg.fusion_len as f64);
    let att_p = s.graph.transpose(ap);
    let av = s.graph.sum_cols(av);
    let av = s.graph.scale(av, 1.0 / cfg.fusion_len as f64);
    let att_v = s.graph.transpose(av);
    let features = s.graph.concat_cols(&[face, att_p, att_v]);
    Ok(SegmentVars {
        phon,
        vis,
        face,
        att_p,
        att_v,
        features,
    })
}

/// Weights of the pretraining terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ec: f64,
    pub info: f64,
    pub cor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ec: 1.0,
            info: 1.0,
            cor: 1.0,
        }
    }
}

/// Loss terms of one batch as graph nodes. Terms that need at least two
/// contrastive rows are `None` when the batch has fewer.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub ec: Option<Var>,
    pub info: Option<Var>,
    pub cor: Option<Var>,
    pub ce: Option<Var>,
    /// Clip-level `(real, fake)` logits, `clips×2`.
    pub clip_logits: Option<Var>,
    pub total: Var,
}

fn stack(s: &mut Session, rows: &[Var]) -> Var {
    s.graph.concat_rows(rows)
}

fn check_nonzero_rows(m: &Mat, what: &str) -> Result<()> {
    if let Some(i) = m.rows().into_iter().position(|r| r.iter().all(|&x| x == 0.0)) {
        return Err(Error::Domain(format!("{what} row {i} has zero norm")));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

fn check_nonzero_cols(m: &Mat, what: &str) -> Result<()> {
    if let Some(j) = m.columns().into_iter().position(|c| c.iter().all(|&x| x == 0.0)) {
        return Err(Error::Domain(format!("{what} column {j} is all zero")));
    }
    Ok(())
}

/// The pretraining terms over the segments in `contrastive` (indices into
/// `segs`), plus the clip-level cross-entropy when `clips` is given.
///
/// `clips` lists, per clip, the indices of its segments and the target
/// (1 for fake).
pub fn batch_loss(
    s: &mut Session,
    model: &Model,
    segs: &[SegmentVars],
    contrastive: &[usize],
    weights: LossWeights,
    clips: Option<(&[Vec<usize>], &[f64], f64)>,
) -> Result<BatchLoss> {
    let cfg = &model.config;
    let mut terms: Vec<Var> = Vec::new();
    let (mut ec, mut info, mut cor, mut ce, mut clip_logits) = (None, None, None, None, None);
    if contrastive.len() >= 2 {
        let pick = |s: &mut Session, f: fn(&SegmentVars) -> Var| {
            let rows: Vec<Var> = contrastive.iter().map(|&i| f(&segs[i])).collect();
            stack(s, &rows)
        };
        let phon = pick(s, |v| v.phon);
        let vis = pick(s, |v| v.vis);
        let face = pick(s, |v| v.face);
        let [pa, pc, fa, fc] = model.heads.project(s, phon, vis, face)?;
        for (v, what) in [(pa, "S_pv phoneme"), (pc, "S_pv viseme"), (fa, "S_pf anchor"), (fc, "S_pf face")] {
            check_nonzero_rows(s.value(v), what)?;
        }
        let l_ec = ec_loss_graph(&mut s.graph, pa, pc, cfg.tau, cfg.ec);
        let l_info = infonce_graph(&mut s.graph, fa, fc, cfg.tau_info);
        let ap = pick(s, |v| v.att_p);
        let av = pick(s, |v| v.att_v);
        let (a, b) = align_graph(s, model.adapter.as_ref(), ap, av);
        check_nonzero_cols(s.value(a), "attended phoneme batch")?;
        check_nonzero_cols(s.value(b), "attended viseme batch")?;
        let l_cor = cgra_graph(&mut s.graph, a, b, cfg.lambda);
        for (l, w) in [(l_ec, weights.ec), (l_info, weights.info), (l_cor, weights.cor)] {
            terms.push(s.graph.scale(l, w));
        }
        ec = Some(l_ec);
        info = Some(l_info);
        cor = Some(l_cor);
    }
    if let Some((groups, targets, w)) = clips {
        let rows: Vec<Var> = segs.iter().map(|v| v.features).collect();
        let feats = stack(s, &rows);
        let logits = model.classifier.forward(s, feats);
        let mut avg = Array2::zeros((groups.len(), segs.len()));
        for (c, g) in groups.iter().enumerate() {
            for &i in g {
                avg[[c, i]] = 1.0 / g.len() as f64;
            }
        }
        let avg = s.constant(avg);
        let clip_logits_v = s.graph.matmul(avg, logits);
        let p = crate::objectives::fake_probability_graph(&mut s.graph, clip_logits_v);
        let l = s.graph.binary_cross_entropy(p, targets, crate::objectives::PROB_EPS);
        terms.push(s.graph.scale(l, w));
        ce = Some(l);
        clip_logits = Some(clip_logits_v);
    }
    let total = match terms.split_first() {
        None => return Err(Error::EmptyInput("batch produced no loss terms".into())),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &t| s.graph.add(acc, t)),
    };
    Ok(BatchLoss {
        ec,
        info,
        cor,
        ce,
        clip_logits,
        total,
    })
}

/// `(real, fake)` logits of one segment.
pub fn segment_logits(s: &mut Session, model: &Model, seg: &SegmentInput) -> Result<[f64; 2]> {
    let v = encode_segment(s, model, seg)?;
    let l = model.classifier.forward(s, v.features);
    let m = s.value(l);
    Ok([m[[0, 0]], m[[0, 1]]])
}
