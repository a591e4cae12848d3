//! On-disk corpus layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<clip_id>/audio.f32     "f32 <n>\n" then n little-endian f32
//! <root>/<clip_id>/viseme.u8     "u8 <T> <H> <W> 3\n" then T·H·W·3 bytes
//! <root>/<clip_id>/face.u8       same layout as viseme.u8
//! <root>/<clip_id>/align.jsonl
//! ```

use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{clip_seed, generate_clip, sha256_hex, splitmix64, GenConfig};
use crate::clip::{ClipTriplet, FakeMode, Label};
use crate::error::{Error, Result};
use crate::screening::parse_alignment;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub label: Label,
    pub fake_mode: FakeMode,
    pub split: Split,
    pub seed: u64,
    pub duration_ms: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub sample_rate: u32,
    pub fps: u32,
    pub config_digest: String,
    pub clips: Vec<ClipEntry>,
}

impl Manifest {
    /// Hex SHA-256 of the manifest JSON.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("manifest serializes").as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipEntry> {
        self.clips.iter().filter(move |c| c.split == split)
    }
}

/// Stratified 8:1:1 split. Per label with `n` clips, validation and test
/// each get `max(1, ⌊n/10⌋)` clips when `n ≥ 3` and none otherwise; the
/// remainder goes to training. Membership is a seeded shuffle.
pub fn assign_splits(labels: &[Label], seed: u64) -> Vec<Split> {
    let mut out = vec![Split::Train; labels.len()];
    for (k, label) in [Label::Real, Label::Fake].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        let n = idx.len();
        let held = if n >= 3 { (n / 10).max(1) } else { 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (k as u64 + 1)));
        idx.shuffle(&mut rng);
        for &i in &idx[..held] {
            out[i] = Split::Val;
        }
        for &i in &idx[held..2 * held] {
            out[i] = Split::Test;
        }
    }
    out
}

/// Labels, fake modes and seeds of every clip the config describes.
pub fn plan(config: &GenConfig) -> Vec<ClipEntry> {
    let n = config.n_real + config.n_fake;
    let labels: Vec<Label> = (0..n).map(|i| if i < config.n_real { Label::Real } else { Label::Fake }).collect();
    let splits = assign_splits(&labels, config.seed);
    (0..n)
        .map(|i| {
            let fake_mode = if i < config.n_real {
                FakeMode::None
            } else {
                let j = i - config.n_real;
                // spread lip-only fakes evenly through the fake block
                let lip = ((j + 1) as f64 * config.lip_only_fraction).floor() > (j as f64 * config.lip_only_fraction).floor();
                if lip {
                    FakeMode::LipOnly
                } else {
                    FakeMode::AvDesync
                }
            };
            ClipEntry {
                id: format!("{}{:05}", config.id_prefix, i),
                label: labels[i],
                fake_mode,
                split: splits[i],
                seed: clip_seed(config.seed, &config.id_prefix, i),
                duration_ms: config.duration_ms,
            }
        })
        .collect()
}

pub fn manifest_for(config: &GenConfig) -> Manifest {
    Manifest {
        version: MANIFEST_VERSION,
        sample_rate: config.sample_rate,
        fps: config.fps,
        config_digest: config.digest(),
        clips: plan(config),
    }
}

/// Generates every clip in memory, in manifest order.
pub fn generate_in_memory(config: &GenConfig) -> Result<(Manifest, Vec<ClipTriplet>)> {
    config.validate()?;
    let manifest = manifest_for(config);
    let clips = manifest
        .clips
        .par_iter()
        .map(|e| generate_clip(config, &e.id, e.seed, e.label, e.fake_mode))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_waveform(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let mut bytes = format!("f32 {} {}\n", samples.len(), sample_rate).into_bytes();
    for s in samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn write_u8_frames(path: &Path, frames: &Array4<u8>) -> Result<()> {
    let (t, h, w, c) = frames.dim();
    let mut bytes = format!("u8 {t} {h} {w} {c}\n").into_bytes();
    bytes.extend(frames.iter());
    write_file(path, &bytes)
}

fn split_header<'a>(path: &Path, bytes: &'a [u8], kind: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Decode(format!("{}: missing header line", path.display())))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Decode(format!("{}: header is not UTF-8", path.display())))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(kind) {
        return Err(Error::Decode(format!("{}: expected a `{kind}` header, got `{header}`", path.display())));
    }
    let dims = parts
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Decode(format!("{}: bad header `{header}`", path.display())))?;
    Ok((dims, &bytes[nl + 1..]))
}

/// Returns the samples and the sample rate.
pub fn read_waveform(path: &Path) -> Result<(Vec<f32>, u32)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, body) = split_header(path, &bytes, "f32")?;
    let [n, sr] = dims[..] else {
        return Err(Error::Decode(format!("{}: audio header needs length and rate", path.display())));
    };
    if body.len() != n * 4 {
        return Err(Error::Decode(format!("{}: expected {} bytes of samples, found {}", path.display(), n * 4, body.len())));
    }
    let samples = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((samples, sr as u32))
}

pub fn read_u8_frames(path: &Path) -> Result<Array4<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, body) = split_header(path, &bytes, "u8")?;
    let [t, h, w, c] = dims[..] else {
        return Err(Error::Decode(format!("{}: frame header needs 4 dimensions", path.display())));
    };
    if body.len() != t * h * w * c {
        return Err(Error::Decode(format!(
            "{}: expected {} frame bytes, found {}",
            path.display(),
            t * h * w * c,
            body.len()
        )));
    }
    Ok(Array4::from_shape_vec((t, h, w, c), body.to_vec()).expect("length checked"))
}

fn write_clip(root: &Path, clip: &ClipTriplet) -> Result<()> {
    let dir = root.join(&clip.clip_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_waveform(&dir.join("audio.f32"), &clip.waveform, clip.sample_rate)?;
    write_u8_frames(&dir.join("viseme.u8"), &clip.viseme)?;
    write_u8_frames(&dir.join("face.u8"), &clip.face)?;
    write_file(&dir.join("align.jsonl"), clip.timeline.to_jsonl().as_bytes())
}

/// Generates the corpus under `root` and returns its manifest.
pub fn generate_corpus(config: &GenConfig, root: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = manifest_for(config);
    manifest.clips.par_iter().try_for_each(|e| {
        let clip = generate_clip(config, &e.id, e.seed, e.label, e.fake_mode)?;
        write_clip(root, &clip)
    })?;
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&path, json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: m.version,
            expected: MANIFEST_VERSION,
        });
    }
    Ok(m)
}

/// Loads one clip; the render log is empty for clips read from disk.
pub fn load_clip(root: &Path, manifest: &Manifest, entry: &ClipEntry) -> Result<ClipTriplet> {
    let dir = root.join(&entry.id);
    let (waveform, sr) = read_waveform(&dir.join("audio.f32"))?;
    if sr != manifest.sample_rate {
        return Err(Error::Validation(format!("{}: audio at {sr} Hz, manifest says {}", entry.id, manifest.sample_rate)));
    }
    let viseme = read_u8_frames(&dir.join("viseme.u8"))?;
    let face = read_u8_frames(&dir.join("face.u8"))?;
    let align = dir.join("align.jsonl");
    let file = fs::File::open(&align).map_err(|e| Error::io(&align, e))?;
    let timeline = parse_alignment(BufReader::new(file), &entry.id, Some(entry.duration_ms))?;
    let clip = ClipTriplet {
        clip_id: entry.id.clone(),
        sample_rate: manifest.sample_rate,
        fps: manifest.fps,
        waveform,
        viseme,
        face,
        timeline,
        label: entry.label,
        fake_mode: entry.fake_mode,
        seed: entry.seed,
        duration_ms: entry.duration_ms,
        render_log: Vec::new(),
    };
    clip.validate()?;
    Ok(clip)
}

/// Loads every clip of the corpus, optionally restricted to one split.
pub fn load_corpus(root: &Path, split: Option<Split>) -> Result<(Manifest, Vec<ClipTriplet>)> {
    let manifest = read_manifest(root)?;
    let entries: Vec<&ClipEntry> = manifest.clips.iter().filter(|e| split.is_none_or(|s| e.split == s)).collect();
    let clips = entries
        .par_iter()
        .map(|e| load_clip(root, &manifest, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_real_clips_split_six_one_one() {
        let c = GenConfig {
            n_real: 8,
            n_fake: 0,
            ..GenConfig::default()
        };
        let m = manifest_for(&c);
        assert_eq!(m.clips.len(), 8);
        let count = |s| m.split(s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 1, 1));
    }

    #[test]
    fn split_arithmetic() {
        for (n, held) in [(0, 0), (1, 0), (2, 0), (3, 1), (19, 1), (20, 2), (100, 10), (2000, 200)] {
            let s = assign_splits(&vec![Label::Real; n], 1);
            assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), held);
            assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), held);
        }
    }

    #[test]
    fn label_balance_and_modes_follow_config() {
        let c = GenConfig {
            n_real: 5,
            n_fake: 6,
            ..GenConfig::default()
        };
        let m = manifest_for(&c);
        assert_eq!(m.clips.iter().filter(|e| e.label == Label::Real).count(), 5);
        assert_eq!(m.clips.iter().filter(|e| e.label == Label::Fake).count(), 6);
        assert_eq!(m.clips.iter().filter(|e| e.fake_mode == FakeMode::LipOnly).count(), 3);
        assert!(m.clips.iter().all(|e| (e.label == Label::Real) == (e.fake_mode == FakeMode::None)));
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let c = GenConfig {
            n_real: 3,
            n_fake: 3,
            ..GenConfig::default()
        };
        let m = generate_corpus(&c, dir.path()).unwrap();
        let (m2, clips) = load_corpus(dir.path(), None).unwrap();
        assert_eq!(m, m2);
        let (_, mem) = generate_in_memory(&c).unwrap();
        for (a, b) in clips.iter().zip(&mem) {
            assert_eq!(a.waveform, b.waveform);
            assert_eq!(a.viseme, b.viseme);
            assert_eq!(a.face, b.face);
            assert_eq!(a.timeline, b.timeline);
        }
        // regeneration gives the same digest
        let dir2 = tempfile::tempdir().unwrap();
        assert_eq!(generate_corpus(&c, dir2.path()).unwrap().digest(), m.digest());
        let test_only = load_corpus(dir.path(), Some(Split::Test)).unwrap().1;
        assert!(test_only.len() <= 2);
    }

    #[test]
    fn truncated_arrays_are_decode_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32");
        write_waveform(&p, &[1.0, 2.0, 3.0], 16000).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 2);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_waveform(&p), Err(Error::Decode(_))));
        let q = dir.path().join("v.u8");
        fs::write(&q, b"u8 2 2 2\n1234").unwrap();
        assert!(matches!(read_u8_frames(&q), Err(Error::Decode(_))));
        assert!(matches!(read_waveform(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
