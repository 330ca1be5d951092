//! Run configuration: every tunable of the pipeline in one validated,
//! JSON-serializable tree.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{StrongAugConfig, WeakAugConfig};
use crate::data::{ScenarioConfig, SyntheticSpec};
use crate::error::{ElsaError, Result};
use crate::objective::{CMode, EnsembleMode, LossKind, ScoreKind};
use crate::optim::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain contrastive pre-training and `L_e` fine-tuning, no shifts.
    Elsa,
    /// Shift-expanded training with the shift-prediction loss.
    ElsaPlus,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Elsa => "elsa",
            Mode::ElsaPlus => "elsa_plus",
        })
    }
}

impl FromStr for Mode {
    type Err = ElsaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elsa" => Ok(Mode::Elsa),
            "elsa_plus" | "elsa+" => Ok(Mode::ElsaPlus),
            _ => Err(ElsaError::invalid(format!("unknown mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
    /// Number of shifting transformations (identity included). Used only in
    /// `elsa_plus` mode; `elsa` runs with the identity alone.
    pub shifts: usize,
    pub shift_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 16,
            shifts: 4,
            shift_seed: 0x5_41f7,
        }
    }
}

/// Augmentation magnitudes in units of the training data's feature std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak: WeakAugConfig,
    pub strong: StrongAugConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    /// Overrides the shared `tau`.
    pub tau: Option<f64>,
    pub probe_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 0.05,
            lr_schedule: LrSchedule::default(),
            momentum: 0.9,
            tau: None,
            probe_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeSection {
    pub count: usize,
    /// Epochs between refreshes; `None` picks the mode default (1 for elsa,
    /// 3 for elsa_plus).
    pub refresh_period: Option<usize>,
    pub warm_start: bool,
}

impl Default for PrototypeSection {
    fn default() -> Self {
        Self {
            count: 16,
            refresh_period: None,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Overrides the shared `tau` for scoring and fine-tuning.
    pub tau: Option<f64>,
    pub score: ScoreKind,
    pub loss: LossKind,
    pub c_mode: CMode,
    /// Record test AUROC per epoch (observation only).
    pub monitor_test: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-4,
            tau: None,
            score: ScoreKind::Energy,
            loss: LossKind::Elsa,
            c_mode: CMode::Analytic,
            monitor_test: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub n_samples: usize,
    pub mode: EnsembleMode,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            n_samples: 10,
            mode: EnsembleMode::Expectation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Seed for model initialization and training randomness.
    pub seed: u64,
    /// Temperature shared by pre-training and scoring unless overridden.
    pub tau: f64,
    pub data: SyntheticSpec,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub pretrain: PretrainSection,
    pub prototypes: PrototypeSection,
    pub finetune: FinetuneSection,
    pub ensemble: EnsembleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ElsaPlus,
            seed: 0,
            tau: 0.5,
            data: SyntheticSpec::default(),
            scenario: ScenarioConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            pretrain: PretrainSection::default(),
            prototypes: PrototypeSection::default(),
            finetune: FinetuneSection::default(),
            ensemble: EnsembleSection::default(),
        }
    }
}

pub const PRESETS: &[&str] = &["default", "smoke"];

impl RunConfig {
    /// Named starting points. `smoke` is a seconds-scale configuration for
    /// checking plumbing end to end.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "smoke" => {
                let mut c = Self::default();
                c.data.samples_per_class = 120;
                c.pretrain.epochs = 3;
                c.pretrain.probe_size = 64;
                c.finetune.epochs = 2;
                c.ensemble.n_samples = 2;
                c.prototypes.count = 12;
                Ok(c)
            }
            _ => Err(ElsaError::invalid(format!(
                "unknown preset '{name}' (expected one of: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Sets every seed (data, split, training) from one value.
    pub fn set_all_seeds(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.scenario.seed = seed;
    }

    pub fn pretrain_tau(&self) -> f64 {
        self.pretrain.tau.unwrap_or(self.tau)
    }

    pub fn score_tau(&self) -> f64 {
        self.finetune.tau.unwrap_or(self.tau)
    }

    pub fn effective_shifts(&self) -> usize {
        match self.mode {
            Mode::Elsa => 1,
            Mode::ElsaPlus => self.model.shifts,
        }
    }

    pub fn refresh_period(&self) -> usize {
        self.prototypes.refresh_period.unwrap_or(match self.mode {
            Mode::Elsa => 1,
            Mode::ElsaPlus => 3,
        })
    }

    /// Every violated constraint, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let taus = [
            ("tau", Some(self.tau)),
            ("pretrain.tau", self.pretrain.tau),
            ("finetune.tau", self.finetune.tau),
        ];
        for (name, t) in taus {
            if let Some(t) = t {
                if !(t > 0.0 && t.is_finite()) {
                    v.push(format!("{name} must be > 0 (got {t})"));
                }
            }
        }
        let k = self.prototypes.count;
        if k == 0 {
            v.push("prototypes.count must be >= 1".to_string());
        }
        let st = self.score_tau();
        if st > 0.0 && k >= 1 && self.finetune.score == ScoreKind::Energy && !((k as f64).ln() > 1.0 / st) {
            v.push(format!(
                "ln(prototypes.count) must exceed 1/tau for positive scores (ln {k} = {:.4}, 1/tau = {:.4})",
                (k as f64).ln(),
                1.0 / st
            ));
        }
        if self.mode == Mode::ElsaPlus && self.model.shifts < 2 {
            v.push(format!(
                "mode elsa_plus requires model.shifts >= 2 (got {})",
                self.model.shifts
            ));
        }
        if self.model.shifts == 0 {
            v.push("model.shifts must be >= 1".to_string());
        }
        if self.model.hidden == 0 || self.model.embed == 0 {
            v.push("model.hidden and model.embed must be positive".to_string());
        }
        v.extend(self.data.validate());
        v.extend(self.scenario.validate());
        v.extend(self.augment.weak.validate());
        v.extend(self.augment.strong.validate(&self.augment.weak));
        if self.pretrain.batch_size < 2 {
            v.push(format!(
                "pretrain.batch_size must be >= 2 (got {})",
                self.pretrain.batch_size
            ));
        }
        if !(self.pretrain.lr > 0.0) {
            v.push(format!("pretrain.lr must be > 0 (got {})", self.pretrain.lr));
        }
        if !(0.0..1.0).contains(&self.pretrain.momentum) {
            v.push(format!(
                "pretrain.momentum must lie in [0, 1) (got {})",
                self.pretrain.momentum
            ));
        }
        if self.pretrain.probe_size < 2 {
            v.push(format!(
                "pretrain.probe_size must be >= 2 (got {})",
                self.pretrain.probe_size
            ));
        }
        if self.prototypes.refresh_period == Some(0) {
            v.push("prototypes.refresh_period must be >= 1".to_string());
        }
        if self.finetune.batch_size == 0 {
            v.push("finetune.batch_size must be >= 1".to_string());
        }
        if !(self.finetune.lr > 0.0) {
            v.push(format!("finetune.lr must be > 0 (got {})", self.finetune.lr));
        }
        if self.ensemble.n_samples == 0 {
            v.push("ensemble.n_samples must be >= 1".to_string());
        }
        if self.ensemble.mode == EnsembleMode::Appendix && self.finetune.score != ScoreKind::Energy {
            v.push("ensemble.mode appendix requires finetune.score energy".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ElsaError::Validation(v))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Applies a `dotted.key=value` override. The value is parsed as JSON,
    /// falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ElsaError::invalid(format!("override '{assignment}' is not key=value")))?;
        let value: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| ElsaError::invalid(format!("'{key}': '{part}' is not inside an object")))?;
            if !obj.contains_key(*part) {
                return Err(ElsaError::invalid(format!("unknown config key '{key}'")));
            }
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj.get_mut(*part).expect("checked above");
        }
        *self =
            serde_json::from_value(tree).map_err(|e| ElsaError::invalid(format!("override '{assignment}': {e}")))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Scenario;

    #[test]
    fn default_is_valid() {
        RunConfig::default().validate().unwrap();
        for p in PRESETS {
            RunConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn every_violation_listed() {
        let mut c = RunConfig::default();
        c.tau = -1.0;
        c.scenario.gamma_l = 1.5;
        c.scenario.gamma_p = -0.1;
        c.model.shifts = 1;
        let v = c.violations();
        assert!(v.iter().any(|m| m.starts_with("tau must be > 0")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("gamma_l")));
        assert!(v.iter().any(|m| m.contains("gamma_p")));
        assert!(v.iter().any(|m| m.contains("elsa_plus requires model.shifts >= 2")));
        assert_eq!(v.len(), 4, "{v:?}");
    }

    #[test]
    fn prototype_count_guard() {
        let mut c = RunConfig::default();
        c.prototypes.count = 7; // ln 7 < 2
        assert_eq!(c.violations().len(), 1);
        c.prototypes.count = 8; // ln 8 > 2
        assert!(c.violations().is_empty());
        c.prototypes.count = 1;
        c.finetune.score = ScoreKind::Cosine;
        assert!(c.violations().is_empty());
    }

    #[test]
    fn s1_pollution_rejected() {
        let mut c = RunConfig::default();
        c.scenario.scenario = Scenario::S1;
        c.scenario.gamma_p = 0.1;
        let v = c.violations();
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("s1 forbids pollution"));
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("finetune.lr=0.001").unwrap();
        c.apply_override("scenario.scenario=s1").unwrap();
        c.apply_override("finetune.score=cosine").unwrap();
        c.apply_override("mode=elsa").unwrap();
        c.apply_override("scenario.labeled_anomaly_classes=[1,2]").unwrap();
        assert_eq!(c.finetune.lr, 0.001);
        assert_eq!(c.scenario.scenario, Scenario::S1);
        assert_eq!(c.finetune.score, ScoreKind::Cosine);
        assert_eq!(c.mode, Mode::Elsa);
        assert_eq!(c.scenario.labeled_anomaly_classes, Some(vec![1, 2]));
        assert!(c.apply_override("finetune.nope=1").is_err());
        assert!(c.apply_override("finetune.lr=fast").is_err());
        assert!(c.apply_override("novalue").is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::preset("smoke").unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let partial = RunConfig::from_json(r#"{"tau": 0.25}"#).unwrap();
        assert_eq!(partial.tau, 0.25);
        assert_eq!(partial.finetune.epochs, 50);
    }
}
