//! Binary solubility labels, per-sample prediction records, and the metric
//! primitives every report is built from. All arithmetic is `f64`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest probability fed to the logarithm in [`cross_entropy`].
pub const CE_CLAMP_PROB: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` for a distribution to count as valid.
const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolubilityLabel {
    Undissolved = 0,
    Dissolved = 1,
}

impl SolubilityLabel {
    pub const ALL: [SolubilityLabel; 2] =
        [SolubilityLabel::Undissolved, SolubilityLabel::Dissolved];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Undissolved),
            1 => Some(Self::Dissolved),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Self::Undissolved => Self::Dissolved,
            Self::Dissolved => Self::Undissolved,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Undissolved => "undissolved",
            Self::Dissolved => "dissolved",
        }
    }
}

impl fmt::Display for SolubilityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolubilityLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "undissolved" => Ok(Self::Undissolved),
            "dissolved" => Ok(Self::Dissolved),
            other => Err(other.to_string()),
        }
    }
}

/// Numerically stable two-way softmax.
pub fn softmax(logits: [f64; 2]) -> Result<[f64; 2]> {
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidLogits(logits));
    }
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let z = e[0] + e[1];
    Ok([e[0] / z, e[1] / z])
}

fn check_distribution(p: [f64; 2]) -> Result<()> {
    if !p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
        return Err(Error::MalformedDistribution(format!(
            "{p:?} has entries outside [0, 1]"
        )));
    }
    if (p[0] + p[1] - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::MalformedDistribution(format!(
            "{p:?} sums to {}",
            p[0] + p[1]
        )));
    }
    Ok(())
}

/// `-ln p[target]`, with `p[target]` clamped below at [`CE_CLAMP_PROB`].
pub fn cross_entropy(p: [f64; 2], target: SolubilityLabel) -> Result<f64> {
    check_distribution(p)?;
    Ok(-p[target.index()].max(CE_CLAMP_PROB).ln())
}

/// Class with the larger probability; an exact tie goes to `Undissolved`.
pub fn argmax(p: [f64; 2]) -> SolubilityLabel {
    if p[1] > p[0] {
        SolubilityLabel::Dissolved
    } else {
        SolubilityLabel::Undissolved
    }
}

/// One classified sample (or frame).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    /// `None` when the vial could not be located.
    pub logits: Option<[f64; 2]>,
    pub probabilities: [f64; 2],
    pub predicted: SolubilityLabel,
    /// Absent at inference time.
    pub target: Option<SolubilityLabel>,
    pub ce_loss: Option<f64>,
    pub fold: Option<usize>,
    #[serde(default)]
    pub detection_failed: bool,
}

impl PredictionRecord {
    pub fn from_logits(
        sample_id: impl Into<String>,
        logits: [f64; 2],
        target: Option<SolubilityLabel>,
        fold: Option<usize>,
    ) -> Result<Self> {
        let probabilities = softmax(logits)?;
        let ce_loss = target
            .map(|t| cross_entropy(probabilities, t))
            .transpose()?;
        Ok(Self {
            sample_id: sample_id.into(),
            logits: Some(logits),
            probabilities,
            predicted: argmax(probabilities),
            target,
            ce_loss,
            fold,
            detection_failed: false,
        })
    }

    /// Sentinel for a sample whose vial was not detected. With a known
    /// target the record puts all mass on the wrong class, so it counts as
    /// a misclassification at the clamped loss; without one it is uniform.
    pub fn detection_failure(
        sample_id: impl Into<String>,
        target: Option<SolubilityLabel>,
        fold: Option<usize>,
    ) -> Self {
        let (probabilities, ce_loss) = match target {
            Some(t) => {
                let mut p = [0.0; 2];
                p[t.other().index()] = 1.0;
                (p, Some(-CE_CLAMP_PROB.ln()))
            }
            None => ([0.5, 0.5], None),
        };
        Self {
            sample_id: sample_id.into(),
            logits: None,
            probabilities,
            predicted: argmax(probabilities),
            target,
            ce_loss,
            fold,
            detection_failed: true,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.target == Some(self.predicted)
    }
}

/// Fraction of correct records over the whole pooled list.
pub fn pooled_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::NoPredictions);
    }
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(correct as f64 / records.len() as f64)
}
