//! Samples, datasets, and the ways of producing them: synthetic generation,
//! scenario splitting, CIFAR-10 ingestion, and the on-disk dataset format.
//!
//! Ground-truth classes live in [`GroundTruth`], which is kept apart from the
//! [`Sample`]s the training code consumes. Training entry points take
//! `&[Sample]`, so they have no way to read a true class.

mod cifar;
mod format;
mod scenario;
mod synthetic;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ElsaError, Result};

pub use cifar::{parse_cifar10_binary, read_cifar10_binary, CifarFeatures, CIFAR_RECORD_LEN};
pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset};
pub use scenario::{
    build_scenario, Scenario, ScenarioConfig, ScenarioPools, ScenarioSplits, AUX_CLASS_OFFSET, OUTLIER_CLASS_OFFSET,
};
pub use synthetic::{generate, SyntheticPool, SyntheticSpec};

/// Semi-supervision tag of a training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemiLabel {
    Unlabeled,
    LabeledNormal,
    LabeledAnomaly,
}

impl SemiLabel {
    /// Wire encoding: 0 unlabeled, +1 labeled normal, −1 labeled anomaly.
    pub fn wire(self) -> i8 {
        match self {
            SemiLabel::Unlabeled => 0,
            SemiLabel::LabeledNormal => 1,
            SemiLabel::LabeledAnomaly => -1,
        }
    }

    pub fn from_wire(v: i8) -> Result<Self> {
        match v {
            0 => Ok(SemiLabel::Unlabeled),
            1 => Ok(SemiLabel::LabeledNormal),
            -1 => Ok(SemiLabel::LabeledAnomaly),
            other => Err(ElsaError::invalid(format!("unknown semi-label {other}"))),
        }
    }

    #[inline]
    pub fn is_anomaly(self) -> bool {
        self == SemiLabel::LabeledAnomaly
    }
}

/// A training-visible sample. The true class is deliberately absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub semi: SemiLabel,
}

/// True classes of a dataset's samples, index-aligned with [`Dataset::samples`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    classes: Vec<u32>,
}

impl GroundTruth {
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// `true` where the sample's class is one of `normal_classes`.
    pub fn normality(&self, normal_classes: &[u32]) -> Vec<bool> {
        self.classes.iter().map(|c| normal_classes.contains(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    samples: Vec<Sample>,
    truth: GroundTruth,
}

impl Dataset {
    pub fn new(dim: usize, samples: Vec<Sample>, classes: Vec<u32>) -> Result<Self> {
        if samples.len() != classes.len() {
            return Err(ElsaError::DimensionMismatch {
                expected: samples.len(),
                got: classes.len(),
            });
        }
        for s in &samples {
            if s.features.len() != dim {
                return Err(ElsaError::DimensionMismatch {
                    expected: dim,
                    got: s.features.len(),
                });
            }
            crate::mathcore::ensure_finite(&s.features, "sample features")?;
        }
        Ok(Self {
            dim,
            samples,
            truth: GroundTruth { classes },
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            samples: Vec::new(),
            truth: GroundTruth { classes: Vec::new() },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Evaluation-only access to the hidden classes.
    pub fn ground_truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn count_semi(&self, semi: SemiLabel) -> usize {
        self.samples.iter().filter(|s| s.semi == semi).count()
    }

    /// SHA-256 over ids, semi-labels, classes and feature bits. Used to audit
    /// that paired experiments saw identical splits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for (s, c) in self.samples.iter().zip(&self.truth.classes) {
            h.update(s.id.to_le_bytes());
            h.update([s.semi.wire() as u8]);
            h.update(c.to_le_bytes());
            for f in &s.features {
                h.update(f.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Raw per-class sample sets, before any scenario is imposed.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub dim: usize,
    pub classes: Vec<ClassSamples>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSamples {
    pub class: u32,
    pub samples: Vec<Vec<f64>>,
}

impl Pool {
    pub fn class(&self, class: u32) -> Option<&ClassSamples> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(|c| c.samples.len()).sum()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.class).collect()
    }
}
