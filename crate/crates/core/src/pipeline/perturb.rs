//! Video-only degradations at five intensity levels. Audio, labels and
//! timelines pass through untouched.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayViewMut3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clip::ClipTriplet;
use crate::error::{Error, Result};
use crate::synthcorpus::splitmix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Saturation,
    Contrast,
    Block,
    Noise,
    Blur,
    Pixelate,
    Compress,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 7] = [
        PerturbKind::Saturation,
        PerturbKind::Contrast,
        PerturbKind::Block,
        PerturbKind::Noise,
        PerturbKind::Blur,
        PerturbKind::Pixelate,
        PerturbKind::Compress,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Saturation => "saturation",
            PerturbKind::Contrast => "contrast",
            PerturbKind::Block => "block",
            PerturbKind::Noise => "noise",
            PerturbKind::Blur => "blur",
            PerturbKind::Pixelate => "pixelate",
            PerturbKind::Compress => "compress",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown perturbation `{s}`")))
    }
}

pub const LEVELS: std::ops::RangeInclusive<u8> = 1..=5;

/// Remaining colour saturation.
pub fn saturation_factor(level: u8) -> f64 {
    [0.7, 0.55, 0.4, 0.25, 0.1][level as usize - 1]
}

/// Remaining contrast around the frame mean.
pub fn contrast_factor(level: u8) -> f64 {
    [0.85, 0.7, 0.55, 0.4, 0.25][level as usize - 1]
}

/// Gaussian noise deviation in 8-bit units.
pub fn noise_sigma(level: u8) -> f64 {
    3.0 * level as f64
}

/// Gaussian blur deviation in pixels.
pub fn blur_sigma(level: u8) -> f64 {
    0.5 * level as f64
}

/// Side of the averaging block.
pub fn pixelate_block(level: u8) -> usize {
    level as usize + 1
}

/// Quantizer step for luma DCT coefficients.
pub fn compress_step(level: u8) -> f64 {
    [8.0, 16.0, 28.0, 44.0, 64.0][level as usize - 1]
}

/// Occluding squares per frame.
pub fn block_count(level: u8) -> usize {
    level as usize
}

fn check_level(level: u8) -> Result<()> {
    if !LEVELS.contains(&level) {
        return Err(Error::Usage(format!("perturbation level must be 1..=5, got {level}")));
    }
    Ok(())
}

pub fn perturb(clip: &ClipTriplet, kind: PerturbKind, level: u8) -> Result<ClipTriplet> {
    check_level(level)?;
    clip.validate()?;
    let seed = splitmix64(splitmix64(clip.seed ^ (kind as u64 + 1) * 0x1000) ^ level as u64);
    let mut out = clip.clone();
    out.viseme = apply(&clip.viseme, kind, level, seed);
    out.face = apply(&clip.face, kind, level, seed ^ 0xFACE);
    out.render_log.clear();
    Ok(out)
}

fn apply(frames: &Array4<u8>, kind: PerturbKind, level: u8, seed: u64) -> Array4<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = frames.mapv(|b| b as f64);
    for mut frame in x.axis_iter_mut(Axis(0)) {
        match kind {
            PerturbKind::Saturation => saturation(&mut frame, saturation_factor(level)),
            PerturbKind::Contrast => contrast(&mut frame, contrast_factor(level)),
            PerturbKind::Block => block(&mut frame, block_count(level), &mut rng),
            PerturbKind::Noise => {
                let n = Normal::new(0.0, noise_sigma(level)).expect("positive sigma");
                frame.mapv_inplace(|v| v + n.sample(&mut rng));
            }
            PerturbKind::Blur => blur(&mut frame, blur_sigma(level)),
            PerturbKind::Pixelate => pixelate(&mut frame, pixelate_block(level)),
            PerturbKind::Compress => compress(&mut frame, compress_step(level)),
        }
    }
    x.mapv(|v| v.round().clamp(0.0, 255.0) as u8)
}

fn luma(p: &[f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn saturation(frame: &mut ArrayViewMut3<f64>, f: f64) {
    for mut px in frame.lanes_mut(Axis(2)) {
        let y = luma(&[px[0], px[1], px[2]]);
        px.mapv_inplace(|c| y + f * (c - y));
    }
}

fn contrast(frame: &mut ArrayViewMut3<f64>, f: f64) {
    let mean = frame.mean().unwrap_or(0.0);
    frame.mapv_inplace(|c| mean + f * (c - mean));
}

fn block(frame: &mut ArrayViewMut3<f64>, count: usize, rng: &mut ChaCha8Rng) {
    let (h, w, _) = frame.dim();
    let side = (h.min(w) / 4).max(1);
    for _ in 0..count {
        let y0 = rng.random_range(0..=h - side);
        let x0 = rng.random_range(0..=w - side);
        frame.slice_mut(ndarray::s![y0..y0 + side, x0..x0 + side, ..]).fill(0.0);
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping.
fn blur(frame: &mut ArrayViewMut3<f64>, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w, c) = frame.dim();
    let src = frame.to_owned();
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[[y, x, ch]] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[[y, (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize, ch]])
                    .sum();
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                frame[[y, x, ch]] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[[(y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize, x, ch]])
                    .sum();
            }
        }
    }
}

fn pixelate(frame: &mut ArrayViewMut3<f64>, side: usize) {
    let (h, w, c) = frame.dim();
    for by in (0..h).step_by(side) {
        for bx in (0..w).step_by(side) {
            let (ye, xe) = ((by + side).min(h), (bx + side).min(w));
            for ch in 0..c {
                let mut v = frame.slice_mut(ndarray::s![by..ye, bx..xe, ch]);
                let m = v.mean().unwrap_or(0.0);
                v.fill(m);
            }
        }
    }
}

const DCT_N: usize = 8;

fn dct_basis() -> [[f64; DCT_N]; DCT_N] {
    let mut b = [[0.0; DCT_N]; DCT_N];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 { (1.0 / DCT_N as f64).sqrt() } else { (2.0 / DCT_N as f64).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * DCT_N) as f64).cos();
        }
    }
    b
}

/// Quantizes luma DCT coefficients of each 8×8 block; chroma is kept as is.
fn compress(frame: &mut ArrayViewMut3<f64>, step: f64) {
    let (h, w, _) = frame.dim();
    let b = dct_basis();
    let mut ycc = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (r, g, bl) = (frame[[y, x, 0]], frame[[y, x, 1]], frame[[y, x, 2]]);
            let l = 0.299 * r + 0.587 * g + 0.114 * bl;
            ycc[[y, x, 0]] = l;
            ycc[[y, x, 1]] = bl - l;
            ycc[[y, x, 2]] = r - l;
        }
    }
    for by in (0..h).step_by(DCT_N) {
        for bx in (0..w).step_by(DCT_N) {
            let mut blk = [[0.0; DCT_N]; DCT_N];
            for (i, row) in blk.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = ycc[[(by + i).min(h - 1), (bx + j).min(w - 1), 0]] - 128.0;
                }
            }
            // coefficients = B·blk·Bᵀ, quantized, then inverted
            let mut coef = [[0.0; DCT_N]; DCT_N];
            for u in 0..DCT_N {
                for v in 0..DCT_N {
                    let mut acc = 0.0;
                    for i in 0..DCT_N {
                        for j in 0..DCT_N {
                            acc += b[u][i] * blk[i][j] * b[v][j];
                        }
                    }
                    // coarser steps for higher frequencies
                    let q = step * (1.0 + (u + v) as f64 / 4.0);
                    coef[u][v] = (acc / q).round() * q;
                }
            }
            for i in 0..DCT_N {
                for j in 0..DCT_N {
                    let (y, x) = (by + i, bx + j);
                    if y >= h || x >= w {
                        continue;
                    }
                    let mut acc = 0.0;
                    for u in 0..DCT_N {
                        for v in 0..DCT_N {
                            acc += b[u][i] * coef[u][v] * b[v][j];
                        }
                    }
                    ycc[[y, x, 0]] = acc + 128.0;
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let l = ycc[[y, x, 0]];
            let r = ycc[[y, x, 2]] + l;
            let bl = ycc[[y, x, 1]] + l;
            let g = (l - 0.299 * r - 0.114 * bl) / 0.587;
            frame[[y, x, 0]] = r;
            frame[[y, x, 1]] = g;
            frame[[y, x, 2]] = bl;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::{FakeMode, Label};
    use crate::synthcorpus::{generate_clip, GenConfig};
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    fn clip() -> ClipTriplet {
        generate_clip(&GenConfig::default(), "p", 11, Label::Fake, FakeMode::LipOnly).unwrap()
    }

    /// Spectral energy outside the lowest quarter of frequencies, averaged
    /// over frames and channels.
    fn high_freq_energy(frames: &Array4<u8>) -> f64 {
        let (t, h, w, c) = frames.dim();
        let mut planner = FftPlanner::<f64>::new();
        let (fr, fc) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
        let mut total = 0.0;
        for f in 0..t {
            for ch in 0..c {
                let mut grid: Vec<Vec<Complex<f64>>> = (0..h)
                    .map(|y| (0..w).map(|x| Complex::new(frames[[f, y, x, ch]] as f64, 0.0)).collect())
                    .collect();
                for row in grid.iter_mut() {
                    fr.process(row);
                }
                for x in 0..w {
                    let mut col: Vec<Complex<f64>> = (0..h).map(|y| grid[y][x]).collect();
                    fc.process(&mut col);
                    for (y, v) in col.into_iter().enumerate() {
                        let fy = y.min(h - y);
                        let fx = x.min(w - x);
                        if fy.max(fx) > h.min(w) / 8 {
                            total += v.norm_sqr();
                        }
                    }
                }
            }
        }
        total / (t * c) as f64
    }

    #[test]
    fn level_schedules_are_monotone() {
        for l in 1..5u8 {
            assert!(noise_sigma(l + 1) > noise_sigma(l));
            assert!(blur_sigma(l + 1) > blur_sigma(l));
            assert!(saturation_factor(l + 1) < saturation_factor(l));
            assert!(contrast_factor(l + 1) < contrast_factor(l));
            assert!(pixelate_block(l + 1) > pixelate_block(l));
            assert!(compress_step(l + 1) > compress_step(l));
        }
    }

    #[test]
    fn deterministic_and_video_only() {
        let c = clip();
        for kind in PerturbKind::ALL {
            let a = perturb(&c, kind, 3).unwrap();
            let b = perturb(&c, kind, 3).unwrap();
            assert_eq!(a.viseme, b.viseme, "{kind}");
            assert_eq!(a.face, b.face);
            assert_eq!(a.waveform, c.waveform);
            assert_eq!(a.timeline, c.timeline);
            assert_eq!(a.label, c.label);
            assert_ne!(a.viseme, c.viseme, "{kind} changed nothing");
        }
    }

    #[test]
    fn blur_removes_high_frequencies() {
        let c = clip();
        let e1 = high_freq_energy(&perturb(&c, PerturbKind::Blur, 1).unwrap().face);
        let e5 = high_freq_energy(&perturb(&c, PerturbKind::Blur, 5).unwrap().face);
        assert!(e5 < e1, "{e5} vs {e1}");
    }

    #[test]
    fn bad_kind_and_level_are_usage_errors() {
        assert!(matches!("jpeg".parse::<PerturbKind>(), Err(Error::Usage(_))));
        assert_eq!("pixelate".parse::<PerturbKind>().unwrap(), PerturbKind::Pixelate);
        assert!(matches!(perturb(&clip(), PerturbKind::Noise, 0), Err(Error::Usage(_))));
        assert!(matches!(perturb(&clip(), PerturbKind::Noise, 6), Err(Error::Usage(_))));
    }

    #[test]
    fn compression_keeps_chroma_on_flat_blocks() {
        // a flat colour survives quantization exactly up to rounding
        let mut f = Array3::<f64>::zeros((8, 8, 3));
        for mut px in f.lanes_mut(Axis(2)) {
            px[0] = 200.0;
            px[1] = 40.0;
            px[2] = 90.0;
        }
        let mut v = f.clone();
        compress(&mut v.view_mut(), 64.0);
        let cb = |p: &Array3<f64>| p[[0, 0, 2]] - luma(&[p[[0, 0, 0]], p[[0, 0, 1]], p[[0, 0, 2]]]);
        assert!((cb(&v) - cb(&f)).abs() < 1e-9);
    }
}
