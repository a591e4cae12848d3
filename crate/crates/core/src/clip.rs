//! The audio + lip video + face video sample that flows through the system.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::screening::SegmentTimeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// 1.0 for fake, 0.0 for real.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeMode {
    None,
    /// Audio replaced by independent speech; lips re-synchronized only
    /// inside critical segments.
    AvDesync,
    /// Audio kept; lips re-rendered from a wrong phoneme inside
    /// non-critical segments.
    LipOnly,
}

/// What the renderer drew in one video frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRender {
    pub phoneme: String,
    pub aperture: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipTriplet {
    pub clip_id: String,
    pub sample_rate: u32,
    pub fps: u32,
    pub waveform: Vec<f32>,
    /// Lip crop, `T×H×W×3`.
    pub viseme: Array4<u8>,
    /// Face, `T×H×W×3`.
    pub face: Array4<u8>,
    pub timeline: SegmentTimeline,
    pub label: Label,
    pub fake_mode: FakeMode,
    pub seed: u64,
    pub duration_ms: u32,
    /// Per-frame render record, present for freshly generated clips only.
    pub render_log: Vec<FrameRender>,
}

impl ClipTriplet {
    pub fn n_frames(&self) -> usize {
        self.viseme.dim().0
    }

    pub fn frame_period_ms(&self) -> f64 {
        1000.0 / self.fps as f64
    }

    pub fn audio_duration_ms(&self) -> f64 {
        self.waveform.len() as f64 * 1000.0 / self.sample_rate as f64
    }

    pub fn video_duration_ms(&self) -> f64 {
        self.n_frames() as f64 * self.frame_period_ms()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.fps == 0 {
            return Err(Error::Validation(format!("{}: sample rate and fps must be positive", self.clip_id)));
        }
        if self.viseme.dim().0 != self.face.dim().0 {
            return Err(Error::Validation(format!(
                "{}: viseme has {} frames, face has {}",
                self.clip_id,
                self.viseme.dim().0,
                self.face.dim().0
            )));
        }
        if self.viseme.dim().3 != 3 || self.face.dim().3 != 3 {
            return Err(Error::Validation(format!("{}: frames must have 3 channels", self.clip_id)));
        }
        let period = self.frame_period_ms();
        let total = self.timeline.total_ms as f64;
        for (what, d) in [("audio", self.audio_duration_ms()), ("video", self.video_duration_ms())] {
            if (d - total).abs() > period {
                return Err(Error::Validation(format!(
                    "{}: {what} lasts {d:.1} ms but timeline covers {total} ms",
                    self.clip_id
                )));
            }
        }
        match (self.label, self.fake_mode) {
            (Label::Real, FakeMode::None) | (Label::Fake, FakeMode::AvDesync | FakeMode::LipOnly) => Ok(()),
            (l, m) => Err(Error::Validation(format!("{}: label {l:?} with fake mode {m:?}", self.clip_id))),
        }
    }
}
