//! Video-level prediction and metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{segment_logits, usable_slices, ModelParams, SegmentInput};
use crate::clip::{ClipTriplet, Label};
use crate::error::{Error, Result};
use crate::params::Session;
use crate::synthcorpus::sha256_hex;

/// Softmax probability of the fake class for `(real, fake)` logits.
/// Equal logits give exactly 0.5.
pub fn fake_probability(z: [f64; 2]) -> f64 {
    1.0 / (1.0 + (z[0] - z[1]).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub label: Label,
    pub probability: f64,
    pub segments: usize,
    /// Set when the clip had no usable non-critical segment and the
    /// probability is the uninformative 0.5.
    pub no_segments: bool,
}

/// Mean of the segment logits over every usable non-critical segment,
/// mapped through the softmax.
pub fn predict(params: &ModelParams, clip: &ClipTriplet) -> Result<Prediction> {
    clip.validate()?;
    let slices = usable_slices(clip)?;
    let mut z = [0.0; 2];
    for sl in &slices {
        let seg = SegmentInput::from_slice(clip, sl, params.config());
        let mut s = Session::inference(&params.store);
        let l = segment_logits(&mut s, &params.model, &seg)?;
        z[0] += l[0];
        z[1] += l[1];
    }
    let n = slices.len();
    if n > 0 {
        z = [z[0] / n as f64, z[1] / n as f64];
    }
    let probability = fake_probability(z);
    if !probability.is_finite() {
        return Err(Error::NonFinite(format!("{}: fake probability", clip.clip_id)));
    }
    Ok(Prediction {
        clip_id: clip.clip_id.clone(),
        label: clip.label,
        probability,
        segments: n,
        no_segments: n == 0,
    })
}

/// Area under the ROC curve by the Mann–Whitney rank statistic, ties
/// counted ½. `None` unless both classes are present.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip_id: String,
    pub label: Label,
    pub probability: f64,
    pub no_segments: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when the split holds a single label.
    pub auc: Option<f64>,
    /// Accuracy at threshold 0.5 (`p > 0.5` means fake).
    pub acc: f64,
    pub n_videos: usize,
    pub scores: Vec<ClipScore>,
    /// Digest of the model archive and evaluated clip ids.
    pub config_digest: String,
}

impl MetricsReport {
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("report serializes").as_bytes())
    }

    pub fn mean_probability(&self, label: Label) -> Option<f64> {
        let v: Vec<f64> = self.scores.iter().filter(|s| s.label == label).map(|s| s.probability).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Metrics from already computed per-clip scores.
pub fn metrics_from_scores(scores: Vec<ClipScore>, config_digest: String) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("evaluation split is empty".into()));
    }
    let probs: Vec<f64> = scores.iter().map(|s| s.probability).collect();
    let pos: Vec<bool> = scores.iter().map(|s| s.label == Label::Fake).collect();
    let correct = probs.iter().zip(&pos).filter(|(&p, &y)| (p > 0.5) == y).count();
    Ok(MetricsReport {
        auc: auc(&probs, &pos),
        acc: correct as f64 / scores.len() as f64,
        n_videos: scores.len(),
        scores,
        config_digest,
    })
}

pub fn evaluate(params: &ModelParams, clips: &[ClipTriplet]) -> Result<MetricsReport> {
    let preds = clips.par_iter().map(|c| predict(params, c)).collect::<Result<Vec<_>>>()?;
    let mut ids = String::new();
    for c in clips {
        ids.push_str(&c.clip_id);
        ids.push('\n');
    }
    let digest = sha256_hex(format!("{}\n{}", params.digest(), ids).as_bytes());
    let scores = preds
        .into_iter()
        .map(|p| ClipScore {
            clip_id: p.clip_id,
            label: p.label,
            probability: p.probability,
            no_segments: p.no_segments,
        })
        .collect();
    metrics_from_scores(scores, digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if a > b {
                        1.0
                    } else if a == b {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_and_tied_scores() {
        let y = [true, false, true, false];
        let s: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(auc(&s, &y), Some(1.0));
        assert_eq!(auc(&[0.5; 4], &y), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
        let m = metrics_from_scores(
            y.iter()
                .zip(&s)
                .map(|(&b, &p)| ClipScore {
                    clip_id: String::new(),
                    label: if b { Label::Fake } else { Label::Real },
                    probability: p,
                    no_segments: false,
                })
                .collect(),
            String::new(),
        )
        .unwrap();
        assert_eq!((m.auc, m.acc), (Some(1.0), 1.0));
    }

    #[test]
    fn equal_logits_give_one_half() {
        assert_eq!(fake_probability([0.0, 0.0]), 0.5);
        assert_eq!(fake_probability([3.25, 3.25]), 0.5);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(
            v in proptest::collection::vec((0u8..6, any::<bool>()), 2..80)
        ) {
            let scores: Vec<f64> = v.iter().map(|x| x.0 as f64 / 5.0).collect();
            let pos: Vec<bool> = v.iter().map(|x| x.1).collect();
            match auc(&scores, &pos) {
                None => prop_assert!(pos.iter().all(|&p| p) || pos.iter().all(|&p| !p)),
                Some(a) => prop_assert!((a - pairwise(&scores, &pos)).abs() < 1e-12),
            }
        }
    }
}
