//! Deterministic synthetic talking clips.
//!
//! Each phoneme has an audio signature (two tones on the 40 Hz grid, so every
//! 400-sample patch holds whole cycles) and a viseme signature (peak mouth
//! aperture and mouth width). A per-clip speaker latent sets a voice tone,
//! skin colour, face texture and mouth width.
//!
//! Fakes follow the calibrated-forger model: inside critical segments the
//! lips always agree with the audio, while at least one non-critical
//! segment disagrees.

mod io;

pub use io::{
    assign_splits, generate_corpus, generate_in_memory, manifest_for, plan, load_clip, load_corpus, read_manifest, read_u8_frames, read_waveform,
    write_u8_frames, write_waveform, ClipEntry, Manifest, Split, MANIFEST_VERSION,
};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clip::{ClipTriplet, FakeMode, FrameRender, Label};
use crate::error::{Error, Result};
use crate::screening::{classify_phoneme, PhonemeSegment, SegmentTimeline};

/// Audio and lip signature of one phoneme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeSignature {
    pub label: String,
    /// Tone pair in Hz.
    pub freqs: (f64, f64),
    /// Peak mouth opening in `[0, 1]`; the aperture over a segment follows
    /// `peak·(0.5 + 0.5·sin(π·u))` for `u ∈ [0, 1)`.
    pub aperture: f64,
    /// Horizontal mouth stretch, around 1.
    pub width: f64,
}

impl PhonemeSignature {
    pub fn aperture_at(&self, u: f64) -> f64 {
        self.aperture * (0.5 + 0.5 * (std::f64::consts::PI * u).sin())
    }
}

fn sig(label: &str, f1: f64, f2: f64, aperture: f64, width: f64) -> PhonemeSignature {
    PhonemeSignature {
        label: label.into(),
        freqs: (f1, f2),
        aperture,
        width,
    }
}

/// One critical phoneme per viseme class plus ten non-critical ones.
pub fn default_inventory() -> Vec<PhonemeSignature> {
    vec![
        sig("ah", 280.0, 1240.0, 0.85, 1.0),
        sig("eh", 360.0, 1840.0, 0.55, 1.15),
        sig("er", 440.0, 1400.0, 0.30, 0.8),
        sig("sh", 520.0, 2560.0, 0.35, 0.65),
        sig("f", 600.0, 2960.0, 0.12, 1.05),
        sig("m", 200.0, 1000.0, 0.0, 1.0),
        sig("aa", 680.0, 1120.0, 0.95, 0.9),
        sig("iy", 240.0, 2280.0, 0.22, 1.3),
        sig("uw", 320.0, 880.0, 0.28, 0.55),
        sig("ow", 480.0, 960.0, 0.62, 0.7),
        sig("l", 400.0, 2120.0, 0.45, 1.0),
        sig("r", 560.0, 1600.0, 0.38, 0.75),
        sig("n", 760.0, 1720.0, 0.18, 0.95),
        sig("s", 840.0, 3200.0, 0.08, 1.25),
        sig("t", 640.0, 2440.0, 0.30, 1.1),
        sig("ae", 720.0, 2040.0, 0.75, 1.2),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_real: usize,
    pub n_fake: usize,
    pub duration_ms: u32,
    pub sample_rate: u32,
    pub fps: u32,
    pub frame_size: usize,
    pub min_phone_ms: u32,
    pub max_phone_ms: u32,
    /// Probability that a drawn phoneme is critical.
    pub critical_rate: f64,
    pub inventory: Vec<PhonemeSignature>,
    /// Standard deviation of additive audio noise.
    pub audio_noise: f64,
    /// Standard deviation of additive pixel noise, in 8-bit units.
    pub pixel_noise: f64,
    /// Fraction of fakes made with [`FakeMode::LipOnly`]; the rest use
    /// [`FakeMode::AvDesync`].
    pub lip_only_fraction: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_real: 8,
            n_fake: 8,
            duration_ms: 1000,
            sample_rate: 16000,
            fps: 25,
            frame_size: 32,
            min_phone_ms: 80,
            max_phone_ms: 200,
            critical_rate: 0.5,
            inventory: default_inventory(),
            audio_noise: 0.05,
            pixel_noise: 2.0,
            lip_only_fraction: 0.5,
            seed: 7,
            id_prefix: "clip".into(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_rate == 0 || self.fps == 0 || self.frame_size < 8 {
            return bad("sample_rate and fps must be positive, frame_size at least 8".into());
        }
        if self.min_phone_ms == 0 || self.max_phone_ms < self.min_phone_ms {
            return bad(format!("phone length range [{}, {}] ms is empty", self.min_phone_ms, self.max_phone_ms));
        }
        if self.duration_ms < self.min_phone_ms {
            return bad(format!(
                "duration {} ms cannot hold one phoneme of at least {} ms",
                self.duration_ms, self.min_phone_ms
            ));
        }
        if (self.duration_ms as u64 * self.fps as u64) % 1000 != 0 || (self.duration_ms as u64 * self.sample_rate as u64) % 1000 != 0 {
            return bad(format!("duration {} ms is not a whole number of frames and samples", self.duration_ms));
        }
        if !(0.0..=1.0).contains(&self.critical_rate) || !(0.0..=1.0).contains(&self.lip_only_fraction) {
            return bad("critical_rate and lip_only_fraction must lie in [0, 1]".into());
        }
        if self.audio_noise < 0.0 || self.pixel_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        let (crit, non) = self.split_inventory();
        if crit.len() < 3 || non.len() < 3 {
            return bad(format!(
                "inventory needs at least 3 critical and 3 non-critical phonemes, has {} and {}",
                crit.len(),
                non.len()
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (i, s) in self.inventory.iter().enumerate() {
            if self.inventory[..i].iter().any(|o| o.label == s.label) {
                return bad(format!("phoneme `{}` listed twice", s.label));
            }
            if !(0.0..=1.0).contains(&s.aperture) || s.width <= 0.0 {
                return bad(format!("phoneme `{}` has an invalid viseme signature", s.label));
            }
            if s.freqs.0 <= 0.0 || s.freqs.1 <= 0.0 || s.freqs.0 >= nyquist || s.freqs.1 >= nyquist {
                return bad(format!("phoneme `{}` tones must lie in (0, {nyquist}) Hz", s.label));
            }
        }
        Ok(())
    }

    /// Indices of critical and non-critical inventory entries.
    pub fn split_inventory(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.inventory.len()).partition(|&i| classify_phoneme(&self.inventory[i].label).is_critical())
    }

    pub fn signature(&self, label: &str) -> Option<&PhonemeSignature> {
        self.inventory.iter().find(|s| s.label == label)
    }

    pub fn n_frames(&self) -> usize {
        (self.duration_ms as u64 * self.fps as u64 / 1000) as usize
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_ms as u64 * self.sample_rate as u64 / 1000) as usize
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed of clip `index`, independent of generation order.
pub fn clip_seed(seed: u64, prefix: &str, index: usize) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(prefix)) ^ index as u64)
}

/// Appearance and voice shared by all streams of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    /// Voice tone in Hz, on the 40 Hz grid.
    pub f0: f64,
    pub skin: [f64; 3],
    pub lip: [f64; 3],
    pub mouth_scale: f64,
    /// Spatial frequency and phase of the face texture.
    pub texture: (f64, f64),
}

impl Speaker {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let f0 = [120.0, 160.0, 200.0, 240.0][rng.random_range(0..4)];
        let tone = rng.random_range(0.0..1.0);
        let skin = [150.0 + 80.0 * tone, 110.0 + 70.0 * tone, 80.0 + 60.0 * tone];
        let lip = [rng.random_range(150.0..220.0), rng.random_range(40.0..90.0), rng.random_range(50.0..100.0)];
        Self {
            f0,
            skin,
            lip,
            mouth_scale: rng.random_range(0.85..1.15),
            texture: (rng.random_range(0.2..0.8), rng.random_range(0.0..std::f64::consts::TAU)),
        }
    }
}

/// Draws a phoneme sequence tiling `[0, duration_ms)` with at least one
/// non-critical segment.
fn draw_timeline(config: &GenConfig, clip_id: &str, rng: &mut impl Rng) -> Result<SegmentTimeline> {
    let (crit, non) = config.split_inventory();
    let pick = |rng: &mut dyn rand::RngCore| -> usize {
        if rng.random_bool(config.critical_rate) {
            crit[rng.random_range(0..crit.len())]
        } else {
            non[rng.random_range(0..non.len())]
        }
    };
    let mut bounds = vec![0u32];
    while *bounds.last().expect("non-empty") < config.duration_ms {
        let d = rng.random_range(config.min_phone_ms..=config.max_phone_ms);
        bounds.push((bounds.last().expect("non-empty") + d).min(config.duration_ms));
    }
    // fold a short tail into its predecessor
    if bounds.len() > 2 {
        let n = bounds.len();
        if bounds[n - 1] - bounds[n - 2] < config.min_phone_ms / 2 {
            bounds.remove(n - 2);
        }
    }
    let mut labels: Vec<usize> = (0..bounds.len() - 1).map(|_| pick(rng)).collect();
    if labels.iter().all(|&i| classify_phoneme(&config.inventory[i].label).is_critical()) {
        let at = rng.random_range(0..labels.len());
        labels[at] = non[rng.random_range(0..non.len())];
    }
    let segments = labels
        .iter()
        .zip(bounds.windows(2))
        .map(|(&i, w)| PhonemeSegment::new(config.inventory[i].label.clone(), w[0], w[1]))
        .collect::<Result<Vec<_>>>()?;
    SegmentTimeline::new(clip_id, config.duration_ms, segments)
}

/// Phoneme and position `u ∈ [0,1)` within its segment at time `t_ms`.
fn phase_at(timeline: &SegmentTimeline, t_ms: f64) -> (&PhonemeSegment, f64) {
    let seg = timeline
        .segment_at(t_ms)
        .or_else(|| timeline.segments().last())
        .expect("timeline covers the clip");
    let u = ((t_ms - seg.start_ms as f64) / seg.duration_ms() as f64).clamp(0.0, 0.999_999);
    (seg, u)
}

fn synth_audio(config: &GenConfig, timeline: &SegmentTimeline, speaker: &Speaker, rng: &mut impl Rng) -> Vec<f32> {
    let sr = config.sample_rate as f64;
    let n = config.n_samples();
    let noise = Normal::new(0.0, config.audio_noise.max(1e-12)).expect("valid std");
    let mut out = vec![0.0f32; n];
    let tau = std::f64::consts::TAU;
    for seg in timeline.segments() {
        let sig = config.signature(&seg.label).expect("timeline drawn from inventory");
        let s0 = (seg.start_ms as u64 * config.sample_rate as u64 / 1000) as usize;
        let s1 = ((seg.end_ms as u64 * config.sample_rate as u64 / 1000) as usize).min(n);
        let len = (s1 - s0) as f64;
        for i in s0..s1 {
            let t = (i - s0) as f64 / sr;
            // raised-cosine envelope over the segment
            let env = 0.6 + 0.4 * (0.5 - 0.5 * (tau * (i - s0) as f64 / len).cos());
            let tones = 0.4 * (tau * sig.freqs.0 * t).sin() + 0.3 * (tau * sig.freqs.1 * t).sin();
            let voice = 0.15 * (tau * speaker.f0 * t).sin();
            out[i] = (env * tones + voice) as f32;
        }
    }
    if config.audio_noise > 0.0 {
        for x in out.iter_mut() {
            *x += noise.sample(rng) as f32;
        }
    }
    out
}

fn put(frame: &mut ndarray::ArrayViewMut3<u8>, y: usize, x: usize, rgb: [f64; 3]) {
    for c in 0..3 {
        frame[[y, x, c]] = rgb[c].round().clamp(0.0, 255.0) as u8;
    }
}

fn in_ellipse(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    if ry <= 0.0 || rx <= 0.0 {
        return false;
    }
    let dy = (y - cy) / ry;
    let dx = (x - cx) / rx;
    dy * dy + dx * dx <= 1.0
}

/// Draws a mouth centred at `(cy, cx)`; `scale` shrinks it for the face view.
fn draw_mouth(frame: &mut ndarray::ArrayViewMut3<u8>, speaker: &Speaker, sig: &PhonemeSignature, aperture: f64, cy: f64, cx: f64, scale: f64) {
    let (h, w) = (frame.dim().0, frame.dim().1);
    let rx = (7.0 + 4.0 * sig.width) * speaker.mouth_scale * scale;
    let ry = (3.0 + 8.0 * aperture) * scale;
    let inner_rx = rx - 2.0 * scale;
    let inner_ry = (ry - 2.5 * scale).max(0.0);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            if in_ellipse(fy, fx, cy, cx, inner_ry, inner_rx) {
                put(frame, y, x, [40.0, 10.0, 20.0]);
            } else if in_ellipse(fy, fx, cy, cx, ry, rx) {
                put(frame, y, x, speaker.lip);
            }
        }
    }
}

fn lip_frame(frame: &mut ndarray::ArrayViewMut3<u8>, speaker: &Speaker, sig: &PhonemeSignature, aperture: f64, size: usize) {
    for y in 0..size {
        for x in 0..size {
            put(frame, y, x, speaker.skin);
        }
    }
    let c = size as f64 / 2.0;
    draw_mouth(frame, speaker, sig, aperture, c, c, size as f64 / 32.0);
}

fn face_frame(frame: &mut ndarray::ArrayViewMut3<u8>, speaker: &Speaker, sig: &PhonemeSignature, aperture: f64, size: usize) {
    let s = size as f64 / 32.0;
    let (fq, ph) = speaker.texture;
    for y in 0..size {
        for x in 0..size {
            let t = 12.0 * ((fq * x as f64 / s + ph).sin() * (fq * y as f64 / s).cos());
            let rgb = if (y as f64) < 5.0 * s {
                [60.0 + t, 40.0 + t, 30.0 + t]
            } else {
                [speaker.skin[0] + t, speaker.skin[1] + t, speaker.skin[2] + t]
            };
            put(frame, y, x, rgb);
        }
    }
    for ex in [10.0, 22.0] {
        let (ey, ex) = ((11.0 * s) as usize, (ex * s) as usize);
        for dy in 0..(2.0 * s).max(1.0) as usize {
            for dx in 0..(2.0 * s).max(1.0) as usize {
                put(frame, (ey + dy).min(size - 1), (ex + dx).min(size - 1), [20.0, 20.0, 30.0]);
            }
        }
    }
    draw_mouth(frame, speaker, sig, aperture, 24.0 * s, 16.0 * s, 0.5 * s);
}

fn add_pixel_noise(frames: &mut Array4<u8>, sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let noise = Normal::new(0.0, sigma).expect("valid std");
    for v in frames.iter_mut() {
        *v = (*v as f64 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8;
    }
}

/// What each frame shows: `(phoneme, u)` per frame.
type Script = Vec<(String, f64)>;

fn script_from(timeline: &SegmentTimeline, config: &GenConfig) -> Script {
    let period = 1000.0 / config.fps as f64;
    (0..config.n_frames())
        .map(|f| {
            let (seg, u) = phase_at(timeline, (f as f64 + 0.5) * period);
            (seg.label.clone(), u)
        })
        .collect()
}

fn frames_in(seg: &PhonemeSegment, config: &GenConfig) -> std::ops::Range<usize> {
    // frames whose centre lies inside the segment
    let period = 1000.0 / config.fps as f64;
    let first = ((seg.start_ms as f64 / period) - 0.5).ceil().max(0.0) as usize;
    let last = ((seg.end_ms as f64 / period) - 0.5).ceil().max(0.0) as usize;
    first..last.min(config.n_frames())
}

fn render(config: &GenConfig, script: &Script, speaker: &Speaker, rng: &mut impl Rng) -> (Array4<u8>, Array4<u8>, Vec<FrameRender>) {
    let n = config.n_frames();
    let size = config.frame_size;
    let mut vis = Array4::<u8>::zeros((n, size, size, 3));
    let mut face = Array4::<u8>::zeros((n, size, size, 3));
    let mut log = Vec::with_capacity(n);
    for (f, (label, u)) in script.iter().enumerate() {
        let sig = config.signature(label).expect("script drawn from inventory");
        let a = sig.aperture_at(*u);
        lip_frame(&mut vis.index_axis_mut(ndarray::Axis(0), f), speaker, sig, a, size);
        face_frame(&mut face.index_axis_mut(ndarray::Axis(0), f), speaker, sig, a, size);
        log.push(FrameRender {
            phoneme: label.clone(),
            aperture: a,
        });
    }
    add_pixel_noise(&mut vis, config.pixel_noise, rng);
    add_pixel_noise(&mut face, config.pixel_noise, rng);
    (vis, face, log)
}

/// Frames of `seg` whose rendered phoneme differs from the segment label.
fn mismatched_frames(seg: &PhonemeSegment, script: &Script, config: &GenConfig) -> usize {
    frames_in(seg, config).filter(|&f| script[f].0 != seg.label).count()
}

/// Generates one clip. `seed` fully determines the output.
pub fn generate_clip(config: &GenConfig, clip_id: &str, seed: u64, label: Label, fake_mode: FakeMode) -> Result<ClipTriplet> {
    config.validate()?;
    match (label, fake_mode) {
        (Label::Real, FakeMode::None) | (Label::Fake, FakeMode::AvDesync | FakeMode::LipOnly) => {}
        (l, m) => return Err(Error::Validation(format!("label {l:?} with fake mode {m:?}"))),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speaker = Speaker::sample(&mut rng);
    let timeline = draw_timeline(config, clip_id, &mut rng)?;
    let (_, non) = config.split_inventory();
    let script = match fake_mode {
        FakeMode::None => script_from(&timeline, config),
        FakeMode::AvDesync => {
            // the lips follow an independent utterance except where the
            // audio is critical, where they are calibrated to the audio
            let audio_script = script_from(&timeline, config);
            let mut attempt = 0u64;
            loop {
                let mut vrng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xA5A5 ^ attempt));
                let video_tl = draw_timeline(config, clip_id, &mut vrng)?;
                let mut script = script_from(&video_tl, config);
                for seg in timeline.segments().iter().filter(|s| s.is_critical()) {
                    for f in frames_in(seg, config) {
                        script[f] = audio_script[f].clone();
                    }
                }
                let desynced = timeline
                    .segments()
                    .iter()
                    .filter(|s| !s.is_critical())
                    .any(|s| 2 * mismatched_frames(s, &script, config) > frames_in(s, config).len());
                if desynced {
                    break script;
                }
                attempt += 1;
                if attempt > 64 {
                    return Err(Error::Config("could not desynchronize any non-critical segment".into()));
                }
            }
        }
        FakeMode::LipOnly => {
            let mut script = script_from(&timeline, config);
            for seg in timeline.segments().iter().filter(|s| !s.is_critical()) {
                let mut wrong = non[rng.random_range(0..non.len())];
                while config.inventory[wrong].label == seg.label {
                    wrong = non[rng.random_range(0..non.len())];
                }
                for f in frames_in(seg, config) {
                    script[f].0 = config.inventory[wrong].label.clone();
                }
            }
            script
        }
    };
    let waveform = synth_audio(config, &timeline, &speaker, &mut rng);
    let (viseme, face, render_log) = render(config, &script, &speaker, &mut rng);
    let clip = ClipTriplet {
        clip_id: clip_id.to_string(),
        sample_rate: config.sample_rate,
        fps: config.fps,
        waveform,
        viseme,
        face,
        timeline,
        label,
        fake_mode,
        seed,
        duration_ms: config.duration_ms,
        render_log,
    };
    clip.validate()?;
    audit_clip(config, &clip)?;
    Ok(clip)
}

/// Per-segment comparison of rendered lips against the audio phoneme.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentAudit {
    pub label: String,
    pub critical: bool,
    pub frames: usize,
    /// Frames showing a different phoneme than the audio.
    pub mismatched: usize,
    /// Largest gap between rendered aperture and the audio phoneme's
    /// signature.
    pub max_aperture_gap: f64,
}

pub fn audit_segments(config: &GenConfig, clip: &ClipTriplet) -> Result<Vec<SegmentAudit>> {
    if clip.render_log.len() != clip.n_frames() {
        return Err(Error::Validation(format!("{}: no render log to audit", clip.clip_id)));
    }
    let period = 1000.0 / config.fps as f64;
    clip.timeline
        .segments()
        .iter()
        .map(|seg| {
            let sig = config
                .signature(&seg.label)
                .ok_or_else(|| Error::Validation(format!("phoneme `{}` not in inventory", seg.label)))?;
            let mut audit = SegmentAudit {
                label: seg.label.clone(),
                critical: seg.is_critical(),
                frames: 0,
                mismatched: 0,
                max_aperture_gap: 0.0,
            };
            for f in frames_in(seg, config) {
                let r = &clip.render_log[f];
                let (_, u) = phase_at(&clip.timeline, (f as f64 + 0.5) * period);
                audit.frames += 1;
                audit.mismatched += (r.phoneme != seg.label) as usize;
                audit.max_aperture_gap = audit.max_aperture_gap.max((r.aperture - sig.aperture_at(u)).abs());
            }
            Ok(audit)
        })
        .collect()
}

/// Real clips agree everywhere; fakes agree on every critical segment and
/// disagree on at least one non-critical segment.
pub fn audit_clip(config: &GenConfig, clip: &ClipTriplet) -> Result<()> {
    let audits = audit_segments(config, clip)?;
    let fail = |m: &str| Err(Error::Validation(format!("{}: self-audit failed: {m}", clip.clip_id)));
    match clip.label {
        Label::Real => {
            if audits.iter().any(|a| a.mismatched > 0 || a.max_aperture_gap > 1e-12) {
                return fail("real clip has a mismatched segment");
            }
        }
        Label::Fake => {
            if audits.iter().any(|a| a.critical && (a.mismatched > 0 || a.max_aperture_gap > 1e-12)) {
                return fail("critical segment of a fake is not calibrated");
            }
            if !audits.iter().any(|a| !a.critical && a.mismatched > 0) {
                return fail("fake has no desynchronized non-critical segment");
            }
        }
    }
    Ok(())
}

/// Mean ground-truth aperture gap over non-critical frames. Zero for real
/// clips and positive for fakes, so a threshold separates them.
pub fn mismatch_score(config: &GenConfig, clip: &ClipTriplet) -> Result<f64> {
    let period = 1000.0 / config.fps as f64;
    let mut total = 0.0;
    let mut n = 0usize;
    for seg in clip.timeline.segments().iter().filter(|s| !s.is_critical()) {
        let sig = config
            .signature(&seg.label)
            .ok_or_else(|| Error::Validation(format!("phoneme `{}` not in inventory", seg.label)))?;
        for f in frames_in(seg, config) {
            let r = clip
                .render_log
                .get(f)
                .ok_or_else(|| Error::Validation(format!("{}: no render log", clip.clip_id)))?;
            let (_, u) = phase_at(&clip.timeline, (f as f64 + 0.5) * period);
            let sig_r = config.signature(&r.phoneme).expect("rendered from inventory");
            let mut gap = (r.aperture - sig.aperture_at(u)).abs() + (sig_r.width - sig.width).abs();
            if r.phoneme != seg.label {
                gap = gap.max(1e-3);
            }
            total += gap;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}
