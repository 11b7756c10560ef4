//! Deployed inference: detect, crop, classify, and vote over a frame buffer.

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::metrics::{PredictionRecord, SolubilityLabel};
use crate::preprocess::{eval_transform, TransformConfig};
use crate::segmentation::{crop_roi, detect_vial, DetectorBackend, DEFAULT_CROP_PADDING};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteRule {
    #[default]
    Majority,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferPolicy {
    pub size: usize,
    pub rule: VoteRule,
    pub tie_break: SolubilityLabel,
}

impl Default for BufferPolicy {
    fn default() -> Self {
        Self {
            size: 5,
            rule: VoteRule::Majority,
            tie_break: SolubilityLabel::Undissolved,
        }
    }
}

impl BufferPolicy {
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningDecision {
    pub label: SolubilityLabel,
    /// Mean probability of `label` over frames that voted; 0 on a tie or
    /// when no frame voted.
    pub confidence: f64,
    pub frames_used: usize,
    pub votes: [usize; 2],
    /// Set when the label came from the tie-break rule.
    pub tie_broken: bool,
    pub per_frame: Vec<PredictionRecord>,
}

/// Per-frame classification. Implementations must be deterministic.
pub trait FrameClassifier: Sync {
    /// A missing vial is reported as [`Error::VialNotFound`].
    fn classify(&self, frame_id: &str, image: &ImageRgb) -> Result<PredictionRecord>;
}

/// One frame through the full cascade. Targets and fold are absent.
pub fn screen_image(
    frame_id: &str,
    image: &ImageRgb,
    model: &ClassifierModel,
    backend: &dyn DetectorBackend,
    transform: &TransformConfig,
    padding: f64,
) -> Result<PredictionRecord> {
    let det = detect_vial(image, backend).map_err(|e| e.with_frame(frame_id))?;
    let crop = crop_roi(image, &det.bbox, padding)?;
    let x = eval_transform(&crop, transform)?;
    let logits = model.forward(std::slice::from_ref(&x))?[0];
    PredictionRecord::from_logits(frame_id.to_string(), logits, None, None)
}

/// A model and detector bundled as a [`FrameClassifier`].
pub struct Screener<'a> {
    pub model: &'a ClassifierModel,
    pub backend: &'a dyn DetectorBackend,
    pub transform: TransformConfig,
    pub padding: f64,
}

impl<'a> Screener<'a> {
    pub fn new(
        model: &'a ClassifierModel,
        backend: &'a dyn DetectorBackend,
        transform: TransformConfig,
    ) -> Self {
        Self {
            model,
            backend,
            transform,
            padding: DEFAULT_CROP_PADDING,
        }
    }
}

impl FrameClassifier for Screener<'_> {
    fn classify(&self, frame_id: &str, image: &ImageRgb) -> Result<PredictionRecord> {
        screen_image(
            frame_id,
            image,
            self.model,
            self.backend,
            &self.transform,
            self.padding,
        )
    }
}

/// Majority vote over the frames whose detection succeeded.
pub fn vote(
    per_frame: &[PredictionRecord],
    policy: &BufferPolicy,
) -> (SolubilityLabel, f64, [usize; 2], bool) {
    let voting: Vec<&PredictionRecord> = per_frame.iter().filter(|p| !p.detection_failed).collect();
    let mut votes = [0usize; 2];
    for p in &voting {
        votes[p.predicted.index()] += 1;
    }
    let label = match votes[0].cmp(&votes[1]) {
        std::cmp::Ordering::Greater => SolubilityLabel::Undissolved,
        std::cmp::Ordering::Less => SolubilityLabel::Dissolved,
        std::cmp::Ordering::Equal => return (policy.tie_break, 0.0, votes, true),
    };
    let confidence = voting
        .iter()
        .map(|p| p.probabilities[label.index()])
        .sum::<f64>()
        / voting.len() as f64;
    (label, confidence, votes, false)
}

/// Classifies each frame in order and votes. Frames without a vial stay
/// in `per_frame` flagged as detection failures; other errors abort.
pub fn screen_buffered(
    frames: &[(String, ImageRgb)],
    classifier: &dyn FrameClassifier,
    policy: &BufferPolicy,
) -> Result<ScreeningDecision> {
    if policy.size == 0 {
        return Err(Error::Config("buffer size must be at least 1".into()));
    }
    if frames.is_empty() || frames.len() > policy.size {
        return Err(Error::Config(format!(
            "{} frames for a buffer of size {}",
            frames.len(),
            policy.size
        )));
    }
    let per_frame = frames
        .iter()
        .map(|(id, image)| match classifier.classify(id, image) {
            Ok(p) => Ok(p),
            Err(Error::VialNotFound { .. }) => {
                Ok(PredictionRecord::detection_failure(id.clone(), None, None))
            }
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let (label, confidence, votes, tie_broken) = vote(&per_frame, policy);
    Ok(ScreeningDecision {
        label,
        confidence,
        frames_used: per_frame.len(),
        votes,
        tie_broken,
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use SolubilityLabel::{Dissolved as D, Undissolved as U};

    /// Replays a fixed verdict per frame id; `None` means no vial.
    struct Stub(Vec<Option<SolubilityLabel>>);

    impl FrameClassifier for Stub {
        fn classify(&self, frame_id: &str, _: &ImageRgb) -> Result<PredictionRecord> {
            let i: usize = frame_id.parse().unwrap();
            match self.0[i] {
                Some(D) => {
                    PredictionRecord::from_logits(frame_id.to_string(), [0.0, 2.0], None, None)
                }
                Some(U) => {
                    PredictionRecord::from_logits(frame_id.to_string(), [1.0, 0.0], None, None)
                }
                None => Err(Error::VialNotFound {
                    frame: frame_id.into(),
                }),
            }
        }
    }

    fn run(labels: &[Option<SolubilityLabel>], size: usize) -> ScreeningDecision {
        let img = ImageRgb::filled(1, 1, [0, 0, 0]);
        let frames: Vec<_> = (0..labels.len())
            .map(|i| (i.to_string(), img.clone()))
            .collect();
        screen_buffered(
            &frames,
            &Stub(labels.to_vec()),
            &BufferPolicy::with_size(size),
        )
        .unwrap()
    }

    fn pattern(bits: u32) -> Vec<Option<SolubilityLabel>> {
        (0..5)
            .map(|i| Some(if bits >> i & 1 == 1 { D } else { U }))
            .collect()
    }

    #[test]
    fn examples() {
        assert_eq!(
            run(&[Some(D), Some(D), Some(U), Some(D), Some(D)], 5).label,
            D
        );
        let tie = run(&[Some(D), Some(U)], 2);
        assert_eq!((tie.label, tie.confidence, tie.tie_broken), (U, 0.0, true));
        let none = run(&[None, None, None], 5);
        assert_eq!((none.label, none.confidence, none.frames_used), (U, 0.0, 3));
        assert!(none.per_frame.iter().all(|p| p.detection_failed));
    }

    #[test]
    fn failed_frames_do_not_vote() {
        let d = run(&[None, Some(D), None, None, None], 5);
        assert_eq!(d.label, D);
        assert_eq!(d.votes, [0, 1]);
        assert!((d.confidence - 0.880_797_077_977_882_4).abs() < 1e-12);
    }

    #[test]
    fn all_patterns_match_majority_oracle() {
        for bits in 0..32u32 {
            let d = run(&pattern(bits), 5);
            let expected = if bits.count_ones() >= 3 { D } else { U };
            assert_eq!(d.label, expected, "pattern {bits:05b}");
            assert!(!d.tie_broken);
        }
    }

    #[test]
    fn permutation_and_monotonicity() {
        for bits in 0..32u32 {
            let base = run(&pattern(bits), 5);
            let mut rev = pattern(bits);
            rev.reverse();
            let r = run(&rev, 5);
            assert_eq!(r.label, base.label);
            assert!((r.confidence - base.confidence).abs() < 1e-12);
            for i in 0..5 {
                if bits >> i & 1 == 0 {
                    let flipped = run(&pattern(bits | 1 << i), 5);
                    assert!(!(base.label == D && flipped.label == U));
                }
            }
        }
    }

    #[test]
    fn buffer_bounds() {
        let img = ImageRgb::filled(1, 1, [0, 0, 0]);
        let stub = Stub(vec![Some(D); 6]);
        assert!(screen_buffered(&[], &stub, &BufferPolicy::default()).is_err());
        let six: Vec<_> = (0..6).map(|i| (i.to_string(), img.clone())).collect();
        assert!(screen_buffered(&six, &stub, &BufferPolicy::default()).is_err());
    }
}
