//! Patch tokenization of raw waveforms and RGB frame stacks.
//!
//! Audio is cut into `⌈T′/t′⌉` patches of `t′` samples, video into
//! `⌈T/t⌉·⌈H/h⌉·⌈W/w⌉` tubelets of `t×h×w×3` voxels. Partial patches are
//! zero-padded. Each patch is projected linearly to width `d` and a learned
//! per-slot positional embedding is added.

use ndarray::{s, Array2, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Var};
use crate::error::{Error, Result};
use crate::params::{normal_init, ParamId, ParamKind, ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Phoneme,
    Viseme,
    Face,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Samples per audio patch.
    pub audio_patch: usize,
    /// Frames × height × width per video tubelet.
    pub tubelet: (usize, usize, usize),
    /// Embedding width.
    pub d: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            audio_patch: 400,
            tubelet: (2, 8, 8),
            d: 64,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.tubelet;
        if self.audio_patch == 0 || t == 0 || h == 0 || w == 0 || self.d == 0 {
            return Err(Error::Config(format!("patch dimensions must be ≥ 1: {self:?}")));
        }
        Ok(())
    }

    pub fn voxels_per_tubelet(&self) -> usize {
        let (t, h, w) = self.tubelet;
        t * h * w * 3
    }
}

/// Token grid of a tokenized video: `slots` temporal positions, each a
/// `rows×cols` spatial grid, flattened slot-major then row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoGrid {
    pub slots: usize,
    pub rows: usize,
    pub cols: usize,
}

impl VideoGrid {
    pub fn len(&self) -> usize {
        self.slots * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `S×d`.
    pub tokens: Mat,
    pub positions: Vec<usize>,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// Zero-padded `⌈T′/t′⌉ × t′` patch matrix.
pub fn audio_patches(samples: &[f64], patch: usize) -> Result<Mat> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("audio segment has no samples".into()));
    }
    let n = samples.len().div_ceil(patch);
    let mut out = Array2::zeros((n, patch));
    for (i, &x) in samples.iter().enumerate() {
        out[[i / patch, i % patch]] = x;
    }
    Ok(out)
}

/// Zero-padded tubelet matrix, one row per tubelet, voxels flattened in
/// `(frame, row, col, channel)` order.
pub fn video_patches(frames: ArrayView4<f64>, tubelet: (usize, usize, usize)) -> Result<(Mat, VideoGrid)> {
    let (t_len, height, width, ch) = frames.dim();
    if t_len == 0 || height == 0 || width == 0 {
        return Err(Error::EmptyInput("video segment has no frames".into()));
    }
    if ch != 3 {
        return Err(Error::Shape(format!("expected 3 colour channels, got {ch}")));
    }
    let (t, h, w) = tubelet;
    let grid = VideoGrid {
        slots: t_len.div_ceil(t),
        rows: height.div_ceil(h),
        cols: width.div_ceil(w),
    };
    let voxels = t * h * w * 3;
    let mut out = Array2::zeros((grid.len(), voxels));
    for slot in 0..grid.slots {
        for gy in 0..grid.rows {
            for gx in 0..grid.cols {
                let row = (slot * grid.rows + gy) * grid.cols + gx;
                for dt in 0..t {
                    let f = slot * t + dt;
                    if f >= t_len {
                        break;
                    }
                    for dy in 0..h {
                        let y = gy * h + dy;
                        if y >= height {
                            break;
                        }
                        for dx in 0..w {
                            let x = gx * w + dx;
                            if x >= width {
                                break;
                            }
                            let base = ((dt * h + dy) * w + dx) * 3;
                            for c in 0..3 {
                                out[[row, base + c]] = frames[[f, y, x, c]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, grid))
}

fn project(patches: &Mat, proj: &Mat, pos: &Mat, modality: Modality) -> Result<TokenSequence> {
    let n = patches.nrows();
    if proj.nrows() != patches.ncols() {
        return Err(Error::Shape(format!(
            "projection expects {} inputs per patch, patches have {}",
            proj.nrows(),
            patches.ncols()
        )));
    }
    if pos.ncols() != proj.ncols() {
        return Err(Error::Shape("positional table width differs from projection width".into()));
    }
    if n > pos.nrows() {
        return Err(Error::Capacity {
            what: format!("{modality:?} token sequence"),
            got: n,
            max: pos.nrows(),
        });
    }
    let tokens = patches.dot(proj) + &pos.slice(s![..n, ..]);
    Ok(TokenSequence {
        tokens,
        positions: (0..n).collect(),
        modality,
    })
}

/// `token_s = patch_s·W_p + pos_s` over zero-padded audio patches.
pub fn tokenize_audio(samples: &[f64], spec: &PatchSpec, proj: &Mat, pos: &Mat) -> Result<TokenSequence> {
    spec.validate()?;
    let patches = audio_patches(samples, spec.audio_patch)?;
    project(&patches, proj, pos, Modality::Phoneme)
}

/// Tubelet tokenization of a `T×H×W×3` stack.
pub fn tokenize_video(
    frames: ArrayView4<f64>,
    spec: &PatchSpec,
    proj: &Mat,
    pos: &Mat,
    modality: Modality,
) -> Result<(TokenSequence, VideoGrid)> {
    spec.validate()?;
    let (patches, grid) = video_patches(frames, spec.tubelet)?;
    Ok((project(&patches, proj, pos, modality)?, grid))
}

/// Learned projection and positional table for one stream.
#[derive(Debug, Clone, Copy)]
pub struct StreamTokenizer {
    pub proj: ParamId,
    pub pos: ParamId,
    pub modality: Modality,
    pub max_tokens: usize,
}

impl StreamTokenizer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        modality: Modality,
        patch_len: usize,
        d: usize,
        max_tokens: usize,
    ) -> Self {
        let proj = store.register(
            format!("{name}.proj"),
            ParamKind::Weight,
            normal_init(rng, patch_len, d, (1.0 / patch_len as f64).sqrt()),
        );
        let pos = store.register(format!("{name}.pos"), ParamKind::NoDecay, normal_init(rng, max_tokens, d, 0.02));
        Self {
            proj,
            pos,
            modality,
            max_tokens,
        }
    }

    fn embed(&self, s: &mut Session, patches: Mat) -> Result<Var> {
        let n = patches.nrows();
        if n > self.max_tokens {
            return Err(Error::Capacity {
                what: format!("{:?} token sequence", self.modality),
                got: n,
                max: self.max_tokens,
            });
        }
        let p = s.constant(patches);
        let w = s.param(self.proj);
        let pos = s.param(self.pos);
        let x = s.graph.matmul(p, w);
        let pos = s.graph.slice_rows(pos, 0, n);
        Ok(s.graph.add(x, pos))
    }

    pub fn forward_audio(&self, s: &mut Session, samples: &[f64], patch: usize) -> Result<Var> {
        self.embed(s, audio_patches(samples, patch)?)
    }

    pub fn forward_video(
        &self,
        s: &mut Session,
        frames: ArrayView4<f64>,
        tubelet: (usize, usize, usize),
    ) -> Result<(Var, VideoGrid)> {
        let (patches, grid) = video_patches(frames, tubelet)?;
        Ok((self.embed(s, patches)?, grid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Axis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn audio_token_counts() {
        let spec = PatchSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = rand_mat(&mut rng, 400, 64);
        let pos = Array2::zeros((64, 64));
        let seq = tokenize_audio(&vec![0.1; 16000], &spec, &proj, &pos).unwrap();
        assert_eq!(seq.len(), 40);
        let p = audio_patches(&vec![1.0; 401], 400).unwrap();
        assert_eq!(p.nrows(), 2);
        assert_eq!(p.row(1).iter().filter(|&&x| x == 0.0).count(), 399);
    }

    #[test]
    fn zero_audio_and_zero_positions_give_zero_tokens() {
        let spec = PatchSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = rand_mat(&mut rng, 400, 64);
        let seq = tokenize_audio(&[0.0; 1000], &spec, &proj, &Array2::zeros((8, 64))).unwrap();
        assert!(seq.tokens.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let spec = PatchSpec::default();
        let proj = Array2::zeros((400, 64));
        assert!(matches!(
            tokenize_audio(&[], &spec, &proj, &Array2::zeros((8, 64))),
            Err(Error::EmptyInput(_))
        ));
        let frames = Array4::<f64>::zeros((0, 32, 32, 3));
        let vp = Array2::zeros((384, 64));
        assert!(matches!(
            tokenize_video(frames.view(), &spec, &vp, &Array2::zeros((8, 64)), Modality::Viseme),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn too_many_tokens_is_a_capacity_error() {
        let spec = PatchSpec::default();
        let proj = Array2::zeros((400, 64));
        let err = tokenize_audio(&vec![0.0; 4000], &spec, &proj, &Array2::zeros((8, 64))).unwrap_err();
        assert!(matches!(err, Error::Capacity { got: 10, max: 8, .. }));
    }

    #[test]
    fn video_token_count_and_temporal_symmetry() {
        let spec = PatchSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = Array4::from_shape_fn((1, 32, 32, 3), |_| rng.random_range(0.0..1.0));
        let frames = one.broadcast((8, 32, 32, 3)).unwrap().to_owned();
        let proj = rand_mat(&mut rng, 384, 64);
        let (seq, grid) =
            tokenize_video(frames.view(), &spec, &proj, &Array2::zeros((64, 64)), Modality::Viseme).unwrap();
        assert_eq!(seq.len(), 64);
        assert_eq!((grid.slots, grid.rows, grid.cols), (4, 4, 4));
        let per_slot = 16;
        for slot in 1..4 {
            for k in 0..per_slot {
                let a = seq.tokens.row(k);
                let b = seq.tokens.row(slot * per_slot + k);
                assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn identity_projection_exposes_flattened_voxels() {
        let spec = PatchSpec {
            audio_patch: 4,
            tubelet: (2, 2, 2),
            d: 10,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = Array4::from_shape_fn((3, 3, 4, 3), |_| rng.random_range(-1.0..1.0));
        let mut proj = Array2::zeros((24, 10));
        for i in 0..10 {
            proj[[i, i]] = 1.0;
        }
        let (seq, grid) =
            tokenize_video(frames.view(), &spec, &proj, &Array2::zeros((16, 10)), Modality::Face).unwrap();
        assert_eq!((grid.slots, grid.rows, grid.cols), (2, 2, 2));
        // direct flatten oracle
        for slot in 0..2 {
            for gy in 0..2 {
                for gx in 0..2 {
                    let mut flat = Vec::new();
                    for dt in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                for c in 0..3 {
                                    let (f, y, x) = (slot * 2 + dt, gy * 2 + dy, gx * 2 + dx);
                                    let v = if f < 3 && y < 3 && x < 4 { frames[[f, y, x, c]] } else { 0.0 };
                                    flat.push(v);
                                }
                            }
                        }
                    }
                    let row = seq.tokens.row((slot * 2 + gy) * 2 + gx);
                    for i in 0..10 {
                        assert_eq!(row[i], flat[i]);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn token_count_formulas(t in 1usize..9, h in 1usize..20, w in 1usize..20,
                                pt in 1usize..4, ph in 1usize..6, pw in 1usize..6, n in 1usize..3000, pa in 1usize..500) {
            let frames = Array4::<f64>::zeros((t, h, w, 3));
            let (m, grid) = video_patches(frames.view(), (pt, ph, pw)).unwrap();
            prop_assert_eq!(m.nrows(), t.div_ceil(pt) * h.div_ceil(ph) * w.div_ceil(pw));
            prop_assert_eq!(grid.len(), m.nrows());
            prop_assert_eq!(m.ncols(), pt * ph * pw * 3);
            let a = audio_patches(&vec![0.5; n], pa).unwrap();
            prop_assert_eq!(a.nrows(), n.div_ceil(pa));
        }

        #[test]
        fn tokenization_is_linear(scale in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = PatchSpec { audio_patch: 16, tubelet: (2, 4, 4), d: 8 };
            let proj = rand_mat(&mut rng, 16, 8);
            let pos = rand_mat(&mut rng, 8, 8);
            let x: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ax: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let t1 = tokenize_audio(&x, &spec, &proj, &pos).unwrap();
            let t2 = tokenize_audio(&ax, &spec, &proj, &pos).unwrap();
            let n = t1.len();
            let p = pos.slice(s![..n, ..]);
            let lhs = &t2.tokens - &p;
            let rhs = (&t1.tokens - &p) * scale;
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let vp = rand_mat(&mut rng, 96, 8);
            let frames = Array4::from_shape_fn((3, 5, 6, 3), |_| rng.random_range(0.0..1.0));
            let scaled = &frames * scale;
            let (v1, _) = tokenize_video(frames.view(), &spec, &vp, &pos, Modality::Viseme).unwrap();
            let (v2, _) = tokenize_video(scaled.view(), &spec, &vp, &pos, Modality::Viseme).unwrap();
            let n = v1.len();
            let p = pos.slice(s![..n, ..]);
            let d = (&v2.tokens - &p) - (&v1.tokens - &p) * scale;
            prop_assert!(d.iter().all(|x| x.abs() < 1e-12));
            let _ = frames.len_of(Axis(0));
        }
    }
}
