//! Phoneme alignment ingestion and critical-phoneme screening.
//!
//! Forgers calibrate lip shapes for a fixed set of 15 phonemes grouped into
//! six viseme classes; everything else is non-critical and is where the
//! detector looks.
//!
//! | class | phonemes        |
//! |-------|-----------------|
//! | 1     | ay, ah          |
//! | 2     | ey, eh          |
//! | 3     | er              |
//! | 4     | ch, sh, jh, zh  |
//! | 5     | f, v            |
//! | 6     | m, b, p, em     |

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::clip::ClipTriplet;
use crate::error::{Error, Result};

/// Viseme class of a critical phoneme, `1..=6`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VisemeClass(u8);

impl VisemeClass {
    pub fn new(class: u8) -> Option<Self> {
        (1..=6).contains(&class).then_some(Self(class))
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    Critical(VisemeClass),
    NonCritical,
}

impl Criticality {
    pub fn is_critical(self) -> bool {
        matches!(self, Criticality::Critical(_))
    }
}

/// The 15 critical phonemes with their viseme classes.
pub const CRITICAL_PHONEMES: [(&str, u8); 15] = [
    ("ay", 1),
    ("ah", 1),
    ("ey", 2),
    ("eh", 2),
    ("er", 3),
    ("ch", 4),
    ("sh", 4),
    ("jh", 4),
    ("zh", 4),
    ("f", 5),
    ("v", 5),
    ("m", 6),
    ("b", 6),
    ("p", 6),
    ("em", 6),
];

/// Critical for exactly the labels of [`CRITICAL_PHONEMES`]; any other label,
/// including the empty string, is non-critical.
pub fn classify_phoneme(label: &str) -> Criticality {
    CRITICAL_PHONEMES
        .iter()
        .find(|(l, _)| *l == label)
        .map(|&(_, c)| Criticality::Critical(VisemeClass(c)))
        .unwrap_or(Criticality::NonCritical)
}

/// Lowercase and drop ARPAbet stress digits (`AH0` → `ah`).
pub fn normalize_label(raw: &str) -> String {
    raw.trim().trim_end_matches(|c: char| c.is_ascii_digit()).to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSegment {
    pub label: String,
    pub start_ms: u32,
    pub end_ms: u32,
    pub criticality: Criticality,
}

impl PhonemeSegment {
    pub fn new(label: impl Into<String>, start_ms: u32, end_ms: u32) -> Result<Self> {
        let label = label.into();
        if label.is_empty() {
            return Err(Error::Validation("empty phoneme label".into()));
        }
        if end_ms <= start_ms {
            return Err(Error::Validation(format!(
                "segment `{label}` ends at {end_ms} ms, not after its start {start_ms} ms"
            )));
        }
        let criticality = classify_phoneme(&label);
        Ok(Self {
            label,
            start_ms,
            end_ms,
            criticality,
        })
    }

    pub fn duration_ms(&self) -> u32 {
        self.end_ms - self.start_ms
    }

    pub fn is_critical(&self) -> bool {
        self.criticality.is_critical()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTimeline {
    pub clip_id: String,
    pub total_ms: u32,
    segments: Vec<PhonemeSegment>,
}

impl SegmentTimeline {
    /// Validates ordering, non-overlap and bounds.
    pub fn new(clip_id: impl Into<String>, total_ms: u32, segments: Vec<PhonemeSegment>) -> Result<Self> {
        for w in segments.windows(2) {
            if w[1].start_ms < w[0].end_ms {
                return Err(Error::Validation(format!(
                    "segment `{}` at {} ms overlaps or precedes `{}` ending at {} ms",
                    w[1].label, w[1].start_ms, w[0].label, w[0].end_ms
                )));
            }
        }
        if let Some(last) = segments.last() {
            if last.end_ms > total_ms {
                return Err(Error::Validation(format!(
                    "segment `{}` ends at {} ms, past the clip end {total_ms} ms",
                    last.label, last.end_ms
                )));
            }
        }
        Ok(Self {
            clip_id: clip_id.into(),
            total_ms,
            segments,
        })
    }

    pub fn segments(&self) -> &[PhonemeSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Segment covering time `t_ms`, if any.
    pub fn segment_at(&self, t_ms: f64) -> Option<&PhonemeSegment> {
        let idx = self.segments.partition_point(|s| (s.end_ms as f64) <= t_ms);
        self.segments
            .get(idx)
            .filter(|s| (s.start_ms as f64) <= t_ms && t_ms < s.end_ms as f64)
    }

    /// One JSON object per line, chronological.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            let rec = AlignmentRecord {
                phoneme: s.label.clone(),
                start_ms: s.start_ms as i64,
                end_ms: s.end_ms as i64,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// One line of an alignment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub phoneme: String,
    pub start_ms: i64,
    pub end_ms: i64,
}

/// Parse a line-delimited alignment stream. Blank lines are skipped. When
/// `total_ms` is `None` the clip length is taken to be the last segment end.
pub fn parse_alignment<R: BufRead>(reader: R, clip_id: &str, total_ms: Option<u32>) -> Result<SegmentTimeline> {
    let mut segments = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AlignmentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let label = normalize_label(&rec.phoneme);
        if label.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty phoneme label".into(),
            });
        }
        let to_ms = |v: i64, field: &str| {
            u32::try_from(v).map_err(|_| Error::Parse {
                line: lineno,
                message: format!("{field} {v} is not a millisecond count in range"),
            })
        };
        let start = to_ms(rec.start_ms, "start_ms")?;
        let end = to_ms(rec.end_ms, "end_ms")?;
        let seg = PhonemeSegment::new(label, start, end).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {lineno}: {m}")),
            other => other,
        })?;
        segments.push(seg);
    }
    let total = total_ms.unwrap_or_else(|| segments.last().map_or(0, |s| s.end_ms));
    SegmentTimeline::new(clip_id, total, segments)
}

/// Keep only non-critical segments, in order.
pub fn filter_noncritical(timeline: &SegmentTimeline) -> SegmentTimeline {
    SegmentTimeline {
        clip_id: timeline.clip_id.clone(),
        total_ms: timeline.total_ms,
        segments: timeline.segments.iter().filter(|s| !s.is_critical()).cloned().collect(),
    }
}

/// Half-open index interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSlice {
    pub segment: PhonemeSegment,
    pub audio_span: Span,
    pub frame_span: Span,
}

/// Sample and frame counts of a clip, enough to convert milliseconds to
/// indices.
#[derive(Debug, Clone, Copy)]
pub struct ClipGeometry {
    pub sample_rate: u32,
    pub fps: u32,
    pub n_samples: usize,
    pub n_frames: usize,
}

impl ClipGeometry {
    pub fn of(clip: &ClipTriplet) -> Self {
        Self {
            sample_rate: clip.sample_rate,
            fps: clip.fps,
            n_samples: clip.waveform.len(),
            n_frames: clip.n_frames(),
        }
    }
}

/// `[floor(start·rate/1000), ceil(end·rate/1000))` clamped to `[0, limit]`.
pub fn ms_span(start_ms: u32, end_ms: u32, rate: u32, limit: usize) -> Span {
    let lo = (start_ms as u64 * rate as u64) / 1000;
    let hi = (end_ms as u64 * rate as u64).div_ceil(1000);
    Span {
        start: (lo as usize).min(limit),
        end: (hi as usize).min(limit),
    }
}

pub fn slice_geometry(geom: ClipGeometry, timeline: &SegmentTimeline) -> Result<Vec<SegmentSlice>> {
    let period = 1000.0 / geom.fps as f64;
    let total = timeline.total_ms as f64;
    let audio_ms = geom.n_samples as f64 * 1000.0 / geom.sample_rate as f64;
    let video_ms = geom.n_frames as f64 * period;
    for (what, d) in [("audio", audio_ms), ("video", video_ms)] {
        if (d - total).abs() > period {
            return Err(Error::Validation(format!(
                "timeline `{}` covers {total} ms but {what} lasts {d:.1} ms",
                timeline.clip_id
            )));
        }
    }
    Ok(timeline
        .segments
        .iter()
        .filter_map(|seg| {
            let audio_span = ms_span(seg.start_ms, seg.end_ms, geom.sample_rate, geom.n_samples);
            let frame_span = ms_span(seg.start_ms, seg.end_ms, geom.fps, geom.n_frames);
            (!audio_span.is_empty() && !frame_span.is_empty()).then(|| SegmentSlice {
                segment: seg.clone(),
                audio_span,
                frame_span,
            })
        })
        .collect())
}

/// Convert timeline segments to sample and frame spans of `clip`; segments
/// that become empty after clamping are dropped.
pub fn slice_clip(clip: &ClipTriplet, timeline: &SegmentTimeline) -> Result<Vec<SegmentSlice>> {
    slice_geometry(ClipGeometry::of(clip), timeline)
}
