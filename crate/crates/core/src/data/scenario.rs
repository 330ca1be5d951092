//! Splitting a pool into train / validation / test under the three
//! contamination scenarios.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Pool, Sample, SemiLabel};
use crate::error::{ElsaError, Result};

/// Class ids of auxiliary-anomaly samples are `AUX_CLASS_OFFSET + class`.
pub const AUX_CLASS_OFFSET: u32 = 100;
/// Class ids of unseen test outliers are `OUTLIER_CLASS_OFFSET + class`.
pub const OUTLIER_CLASS_OFFSET: u32 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Semi-supervised one-class classification.
    S1,
    /// Same as S1 with anomalies hidden in the unlabeled set.
    S2,
    /// Everything in the primary pool is normal; labeled anomalies come from an
    /// auxiliary distribution and test outliers from a third one.
    S3,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::S1 => "s1",
            Scenario::S2 => "s2",
            Scenario::S3 => "s3",
        })
    }
}

impl FromStr for Scenario {
    type Err = ElsaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" | "1" => Ok(Scenario::S1),
            "s2" | "2" => Ok(Scenario::S2),
            "s3" | "3" => Ok(Scenario::S3),
            _ => Err(ElsaError::invalid(format!("unknown scenario '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub gamma_l: f64,
    pub gamma_p: f64,
    pub seed: u64,
    /// Normal class of the primary pool (ignored by S3).
    pub normal_class: u32,
    /// Anomaly classes that may supply labeled anomalies; `None` means all.
    pub labeled_anomaly_classes: Option<Vec<u32>>,
    /// Fraction of every class held out for testing.
    pub test_fraction: f64,
    /// Fraction of the unlabeled training set held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::S2,
            gamma_l: 0.05,
            gamma_p: 0.05,
            seed: 0,
            normal_class: 0,
            labeled_anomaly_classes: None,
            test_fraction: 0.2,
            validation_fraction: 0.05,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.gamma_l) {
            errs.push(format!("scenario.gamma_l must lie in [0, 1] (got {})", self.gamma_l));
        }
        if !(0.0..=1.0).contains(&self.gamma_p) {
            errs.push(format!("scenario.gamma_p must lie in [0, 1] (got {})", self.gamma_p));
        } else if self.gamma_p >= 1.0 && self.scenario == Scenario::S2 {
            errs.push("scenario.gamma_p must be < 1 under s2".to_string());
        }
        if self.scenario == Scenario::S1 && self.gamma_p > 0.0 {
            errs.push(format!(
                "scenario s1 forbids pollution: gamma_p must be 0 (got {})",
                self.gamma_p
            ));
        }
        if self.scenario == Scenario::S3 && !(self.gamma_l > 0.0) {
            errs.push("scenario s3 needs gamma_l > 0 to draw auxiliary anomalies".to_string());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            errs.push(format!(
                "scenario.test_fraction must lie in [0, 1) (got {})",
                self.test_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            errs.push(format!(
                "scenario.validation_fraction must lie in [0, 1) (got {})",
                self.validation_fraction
            ));
        }
        errs
    }
}

/// The pools a scenario draws from. `auxiliary` and `outliers` are required by
/// S3 only.
#[derive(Debug, Clone)]
pub struct ScenarioPools {
    pub primary: Pool,
    pub auxiliary: Option<Pool>,
    pub outliers: Option<Pool>,
}

impl ScenarioPools {
    pub fn primary_only(primary: Pool) -> Self {
        Self {
            primary,
            auxiliary: None,
            outliers: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    /// Classes counted as normal when scoring the test set.
    pub normal_classes: Vec<u32>,
}

struct Item {
    features: Vec<f64>,
    semi: SemiLabel,
    class: u32,
}

/// Splits `pools` per `config`. A pure function of its inputs: identical
/// arguments give identical splits.
pub fn build_scenario(pools: &ScenarioPools, config: &ScenarioConfig) -> Result<ScenarioSplits> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(ElsaError::Validation(errs));
    }
    let primary = &pools.primary;
    if primary.classes.len() < 2 && config.scenario != Scenario::S3 {
        return Err(ElsaError::invalid("scenario needs a pool with at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Per-class shuffled index lists; the first `test_fraction` go to test.
    let mut split_class = |samples: &[Vec<f64>]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        let n_test = (config.test_fraction * samples.len() as f64).round() as usize;
        let test = idx[..n_test].iter().map(|&i| samples[i].clone()).collect();
        let rest = idx[n_test..].iter().map(|&i| samples[i].clone()).collect();
        (test, rest)
    };

    let mut test_items: Vec<Item> = Vec::new();
    let mut train_normal: Vec<(Vec<f64>, u32)> = Vec::new();
    // Reservoirs of anomaly samples available for labeling / pollution, by class.
    let mut reservoirs: Vec<(u32, Vec<Vec<f64>>)> = Vec::new();
    let normal_classes: Vec<u32>;
    let mut labeling_classes: Vec<u32>;

    match config.scenario {
        Scenario::S1 | Scenario::S2 => {
            let normal = primary
                .class(config.normal_class)
                .ok_or_else(|| ElsaError::invalid(format!("normal class {} not in pool", config.normal_class)))?;
            let (t, rest) = split_class(&normal.samples);
            test_items.extend(t.into_iter().map(|f| Item {
                features: f,
                semi: SemiLabel::Unlabeled,
                class: config.normal_class,
            }));
            train_normal.extend(rest.into_iter().map(|f| (f, config.normal_class)));
            for cls in primary.classes.iter().filter(|c| c.class != config.normal_class) {
                let (t, rest) = split_class(&cls.samples);
                test_items.extend(t.into_iter().map(|f| Item {
                    features: f,
                    semi: SemiLabel::Unlabeled,
                    class: cls.class,
                }));
                reservoirs.push((cls.class, rest));
            }
            normal_classes = vec![config.normal_class];
            labeling_classes = match &config.labeled_anomaly_classes {
                Some(list) => list.clone(),
                None => reservoirs.iter().map(|(c, _)| *c).collect(),
            };
            for c in &labeling_classes {
                if !reservoirs.iter().any(|(rc, _)| rc == c) {
                    return Err(ElsaError::invalid(format!(
                        "labeled anomaly class {c} is not an anomaly class of the pool"
                    )));
                }
            }
        }
        Scenario::S3 => {
            let aux = pools
                .auxiliary
                .as_ref()
                .ok_or_else(|| ElsaError::invalid("scenario s3 requires an auxiliary pool"))?;
            let outliers = pools
                .outliers
                .as_ref()
                .ok_or_else(|| ElsaError::invalid("scenario s3 requires an outlier pool"))?;
            for cls in &primary.classes {
                let (t, rest) = split_class(&cls.samples);
                test_items.extend(t.into_iter().map(|f| Item {
                    features: f,
                    semi: SemiLabel::Unlabeled,
                    class: cls.class,
                }));
                train_normal.extend(rest.into_iter().map(|f| (f, cls.class)));
            }
            // Match the outlier count to the held-out in-distribution count.
            let n_in = test_items.len();
            let n_out_classes = outliers.classes.len().max(1);
            for (i, cls) in outliers.classes.iter().enumerate() {
                let want = n_in / n_out_classes + usize::from(i < n_in % n_out_classes);
                let mut idx: Vec<usize> = (0..cls.samples.len()).collect();
                idx.shuffle(&mut rng);
                test_items.extend(idx.into_iter().take(want).map(|j| Item {
                    features: cls.samples[j].clone(),
                    semi: SemiLabel::Unlabeled,
                    class: OUTLIER_CLASS_OFFSET + cls.class,
                }));
            }
            for cls in &aux.classes {
                let mut samples = cls.samples.clone();
                samples.shuffle(&mut rng);
                reservoirs.push((AUX_CLASS_OFFSET + cls.class, samples));
            }
            normal_classes = primary.class_ids();
            labeling_classes = reservoirs.iter().map(|(c, _)| *c).collect();
        }
    }
    labeling_classes.sort_unstable();
    labeling_classes.dedup();

    train_normal.shuffle(&mut rng);
    let n_labeled = (config.gamma_l * train_normal.len() as f64).round() as usize;
    if config.gamma_l > 0.0 && n_labeled == 0 {
        return Err(ElsaError::invalid(format!(
            "gamma_l = {} labels no normal sample out of {}",
            config.gamma_l,
            train_normal.len()
        )));
    }
    let mut train_items: Vec<Item> = Vec::new();
    let mut unlabeled: Vec<Item> = Vec::new();
    for (i, (f, class)) in train_normal.into_iter().enumerate() {
        if i < n_labeled {
            train_items.push(Item {
                features: f,
                semi: SemiLabel::LabeledNormal,
                class,
            });
        } else {
            unlabeled.push(Item {
                features: f,
                semi: SemiLabel::Unlabeled,
                class,
            });
        }
    }

    // Labeled anomalies: a γ_l fraction of the train-side pool of the labeling
    // classes, spread evenly across them (remainder round-robin by class index).
    if config.gamma_l > 0.0 {
        if labeling_classes.is_empty() {
            return Err(ElsaError::invalid("gamma_l > 0 but the anomaly pool is empty"));
        }
        let budget: usize = reservoirs
            .iter()
            .filter(|(c, _)| labeling_classes.contains(c))
            .map(|(_, v)| v.len())
            .sum();
        let n_anomalies = ((config.gamma_l * budget as f64).round() as usize).max(1);
        for (class, f) in draw_evenly(&mut reservoirs, &labeling_classes, n_anomalies)? {
            train_items.push(Item {
                features: f,
                semi: SemiLabel::LabeledAnomaly,
                class,
            });
        }
    }

    if config.scenario == Scenario::S2 && config.gamma_p > 0.0 {
        let clean = unlabeled.len() as f64;
        let n_inject = (config.gamma_p * clean / (1.0 - config.gamma_p)).round() as usize;
        let every: Vec<u32> = reservoirs.iter().map(|(c, _)| *c).collect();
        if n_inject > 0 && every.is_empty() {
            return Err(ElsaError::invalid("gamma_p > 0 but the anomaly pool is empty"));
        }
        for (class, f) in draw_evenly(&mut reservoirs, &every, n_inject)? {
            unlabeled.push(Item {
                features: f,
                semi: SemiLabel::Unlabeled,
                class,
            });
        }
    }

    unlabeled.shuffle(&mut rng);
    let n_val = (config.validation_fraction * unlabeled.len() as f64).round() as usize;
    let train_unlabeled = unlabeled.split_off(n_val);
    let validation_items = unlabeled;
    train_items.extend(train_unlabeled);
    train_items.shuffle(&mut rng);

    let dim = primary.dim;
    let mut next_id = 0u64;
    let mut to_dataset = |items: Vec<Item>| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(items.len());
        let mut classes = Vec::with_capacity(items.len());
        for it in items {
            samples.push(Sample {
                id: next_id,
                features: it.features,
                semi: it.semi,
            });
            classes.push(it.class);
            next_id += 1;
        }
        Dataset::new(dim, samples, classes)
    };
    let train = to_dataset(train_items)?;
    let validation = to_dataset(validation_items)?;
    let test = to_dataset(test_items)?;
    Ok(ScenarioSplits {
        train,
        validation,
        test,
        normal_classes,
    })
}

/// Takes `n` samples from the reservoirs of `classes`, as evenly as possible,
/// assigning the remainder round-robin in class order.
fn draw_evenly(reservoirs: &mut [(u32, Vec<Vec<f64>>)], classes: &[u32], n: usize) -> Result<Vec<(u32, Vec<f64>)>> {
    let k = classes.len();
    let mut out = Vec::with_capacity(n);
    for (i, c) in classes.iter().enumerate() {
        let want = n / k + usize::from(i < n % k);
        let (_, pool) = reservoirs
            .iter_mut()
            .find(|(rc, _)| rc == c)
            .expect("labeling classes are drawn from the reservoirs");
        if pool.len() < want {
            return Err(ElsaError::invalid(format!(
                "anomaly class {c} has {} samples left, {want} requested",
                pool.len()
            )));
        }
        let rest = pool.split_off(want);
        out.extend(std::mem::replace(pool, rest).into_iter().map(|f| (*c, f)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::data::{generate, SyntheticSpec};

    fn pool(samples_per_class: usize) -> Pool {
        generate(&SyntheticSpec {
            samples_per_class,
            ..Default::default()
        })
        .unwrap()
        .pool
    }

    fn ids(d: &Dataset) -> HashSet<u64> {
        d.samples().iter().map(|s| s.id).collect()
    }

    #[test]
    fn no_labels_no_pollution_gives_fully_unlabeled_train() {
        let cfg = ScenarioConfig {
            scenario: Scenario::S1,
            gamma_l: 0.0,
            gamma_p: 0.0,
            ..Default::default()
        };
        let s = build_scenario(&ScenarioPools::primary_only(pool(200)), &cfg).unwrap();
        assert_eq!(s.train.count_semi(SemiLabel::LabeledNormal), 0);
        assert_eq!(s.train.count_semi(SemiLabel::LabeledAnomaly), 0);
        assert_eq!(s.train.count_semi(SemiLabel::Unlabeled), s.train.len());
        // Only normals in train under S1 without labels.
        assert!(s.train.ground_truth().classes().iter().all(|&c| c == 0));
    }

    #[test]
    fn pollution_hits_target_fraction() {
        // 1250 normals, 20% test -> 1000 train normals, all unlabeled.
        let cfg = ScenarioConfig {
            scenario: Scenario::S2,
            gamma_l: 0.0,
            gamma_p: 0.10,
            validation_fraction: 0.0,
            ..Default::default()
        };
        let s = build_scenario(&ScenarioPools::primary_only(pool(1250)), &cfg).unwrap();
        let classes = s.train.ground_truth().classes();
        let n_u = s.train.count_semi(SemiLabel::Unlabeled);
        let anomalies = classes.iter().filter(|&&c| c != 0).count();
        assert_eq!(n_u - anomalies, 1000);
        let frac = anomalies as f64 / n_u as f64;
        assert!((frac - 0.10).abs() <= 1.0 / n_u as f64, "{frac}");
        // Drawn from every anomaly class, evenly.
        for a in 1..=9u32 {
            let c = classes.iter().filter(|&&x| x == a).count();
            assert!((12..=13).contains(&c), "class {a}: {c}");
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let cfg = ScenarioConfig::default();
        let pools = ScenarioPools::primary_only(pool(300));
        let a = build_scenario(&pools, &cfg).unwrap();
        let b = build_scenario(&pools, &cfg).unwrap();
        assert_eq!(a.train.digest(), b.train.digest());
        assert_eq!(a.validation.digest(), b.validation.digest());
        assert_eq!(a.test.digest(), b.test.digest());
        let (tr, va, te) = (ids(&a.train), ids(&a.validation), ids(&a.test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert!(!va.is_empty());
        // Validation comes only from the unlabeled split.
        assert!(a.validation.samples().iter().all(|s| s.semi == SemiLabel::Unlabeled));
    }

    #[test]
    fn labeled_counts_follow_gamma_l() {
        let cfg = ScenarioConfig {
            scenario: Scenario::S1,
            gamma_l: 0.05,
            gamma_p: 0.0,
            ..Default::default()
        };
        let s = build_scenario(&ScenarioPools::primary_only(pool(1000)), &cfg).unwrap();
        // 800 train normals -> 40 labeled normals; 9 × 800 train-side
        // anomalies -> 360 labeled anomalies.
        assert_eq!(s.train.count_semi(SemiLabel::LabeledNormal), 40);
        assert_eq!(s.train.count_semi(SemiLabel::LabeledAnomaly), 360);
        let gt = s.train.ground_truth().classes();
        for (smp, c) in s.train.samples().iter().zip(gt) {
            match smp.semi {
                SemiLabel::LabeledAnomaly => assert_ne!(*c, 0),
                _ => assert_eq!(*c, 0),
            }
        }
    }

    #[test]
    fn s1_rejects_pollution() {
        let cfg = ScenarioConfig {
            scenario: Scenario::S1,
            gamma_p: 0.1,
            ..Default::default()
        };
        let err = build_scenario(&ScenarioPools::primary_only(pool(50)), &cfg).unwrap_err();
        assert!(err.to_string().contains("s1 forbids pollution"));
    }

    #[test]
    fn empty_anomaly_pool_with_labels_errors() {
        let p = pool(50);
        let only_normal = Pool {
            dim: p.dim,
            classes: vec![p.classes[0].clone(), p.classes[1].clone()],
        };
        let cfg = ScenarioConfig {
            scenario: Scenario::S1,
            gamma_p: 0.0,
            gamma_l: 0.1,
            labeled_anomaly_classes: Some(vec![]),
            ..Default::default()
        };
        assert!(build_scenario(&ScenarioPools::primary_only(only_normal), &cfg).is_err());
    }

    #[test]
    fn s3_uses_auxiliary_and_outlier_pools() {
        let mk = |seed, shift| {
            generate(&SyntheticSpec {
                samples_per_class: 100,
                anomaly_class_count: 2,
                center_shift: shift,
                seed,
                ..Default::default()
            })
            .unwrap()
            .pool
        };
        let pools = ScenarioPools {
            primary: mk(1, 0.0),
            auxiliary: Some(mk(2, 3.0)),
            outliers: Some(mk(3, 3.0)),
        };
        let cfg = ScenarioConfig {
            scenario: Scenario::S3,
            gamma_l: 0.05,
            gamma_p: 0.3, // ignored
            ..Default::default()
        };
        let s = build_scenario(&pools, &cfg).unwrap();
        assert_eq!(s.normal_classes, vec![0, 1, 2]);
        for (smp, c) in s.train.samples().iter().zip(s.train.ground_truth().classes()) {
            if smp.semi.is_anomaly() {
                assert!(*c >= AUX_CLASS_OFFSET && *c < OUTLIER_CLASS_OFFSET);
            } else {
                assert!(*c < AUX_CLASS_OFFSET);
            }
        }
        let labels = s.test.ground_truth().normality(&s.normal_classes);
        let n_in = labels.iter().filter(|&&b| b).count();
        assert_eq!(n_in, labels.len() - n_in);
        assert!(
            s.test
                .ground_truth()
                .classes()
                .iter()
                .filter(|&&c| c >= OUTLIER_CLASS_OFFSET)
                .count()
                > 0
        );
    }
}
