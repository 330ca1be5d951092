use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassSamples, Pool};
use crate::error::{ElsaError, Result};
use crate::mathcore::norm;

const MAX_PLACEMENT_RETRIES: usize = 10_000;

/// Synthetic stand-in for an image dataset: one multi-modal normal class and
/// several unimodal anomaly classes.
///
/// Every component mean (normal subclusters and anomaly classes alike) is
/// drawn uniformly on the sphere of radius `2·cluster_spread` around a common
/// center, subject to a minimum pairwise distance of `2·cluster_spread`.
/// Samples are the component mean plus isotropic Gaussian noise with standard
/// deviation `within_spread`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub input_dim: usize,
    pub normal_subcluster_count: usize,
    pub anomaly_class_count: usize,
    pub cluster_spread: f64,
    pub within_spread: f64,
    pub samples_per_class: usize,
    /// Distance of the common center from the origin, in a seed-drawn
    /// direction. Nonzero values give the shifted distributions used for
    /// auxiliary and outlier sets.
    pub center_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            input_dim: 32,
            normal_subcluster_count: 4,
            anomaly_class_count: 9,
            cluster_spread: 1.0,
            within_spread: 0.5,
            samples_per_class: 1000,
            center_shift: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.input_dim == 0 {
            errs.push("data.input_dim must be positive".to_string());
        }
        if self.normal_subcluster_count == 0 {
            errs.push("data.normal_subcluster_count must be >= 1".to_string());
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            errs.push(format!(
                "data.cluster_spread must be positive (got {})",
                self.cluster_spread
            ));
        }
        if !(self.within_spread >= 0.0 && self.within_spread < self.cluster_spread) {
            errs.push(format!(
                "data.within_spread must lie in [0, cluster_spread) (got {} vs {})",
                self.within_spread, self.cluster_spread
            ));
        }
        if !self.center_shift.is_finite() || self.center_shift < 0.0 {
            errs.push("data.center_shift must be finite and >= 0".to_string());
        }
        errs
    }
}

/// A generated pool plus the generator's hidden structure, which tests use
/// as an oracle.
#[derive(Debug, Clone)]
pub struct SyntheticPool {
    /// Class 0 is normal; anomaly classes are `1..=anomaly_class_count`.
    pub pool: Pool,
    pub subcluster_means: Vec<Vec<f64>>,
    pub anomaly_means: Vec<Vec<f64>>,
    /// Subcluster index of every normal sample, aligned with class 0's samples.
    pub normal_subcluster: Vec<usize>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticPool> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(ElsaError::Validation(errs));
    }
    let d = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let center: Vec<f64> = if spec.center_shift > 0.0 {
        let dir = random_unit(&mut rng, d);
        dir.iter().map(|v| v * spec.center_shift).collect()
    } else {
        vec![0.0; d]
    };

    let radius = 2.0 * spec.cluster_spread;
    let min_dist = 2.0 * spec.cluster_spread;
    let n_components = spec.normal_subcluster_count + spec.anomaly_class_count;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_components);
    for _ in 0..n_components {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let dir = random_unit(&mut rng, d);
            let cand: Vec<f64> = center.iter().zip(&dir).map(|(c, u)| c + radius * u).collect();
            if means.iter().all(|m| distance(m, &cand) >= min_dist) {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(ElsaError::invalid(format!(
                "could not place {n_components} means at pairwise distance >= {min_dist} in dimension {d}"
            )));
        }
    }
    let anomaly_means = means.split_off(spec.normal_subcluster_count);
    let subcluster_means = means;

    let draw = |rng: &mut ChaCha8Rng, mean: &[f64]| -> Vec<f64> {
        mean.iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + spec.within_spread * z
            })
            .collect()
    };

    let mut normal = Vec::with_capacity(spec.samples_per_class);
    let mut normal_subcluster = Vec::with_capacity(spec.samples_per_class);
    for i in 0..spec.samples_per_class {
        // Balanced assignment; the generator shuffles nothing so the split
        // code owns all randomness of ordering.
        let c = i % spec.normal_subcluster_count;
        normal.push(draw(&mut rng, &subcluster_means[c]));
        normal_subcluster.push(c);
    }
    let mut classes = vec![ClassSamples {
        class: 0,
        samples: normal,
    }];
    for (a, mean) in anomaly_means.iter().enumerate() {
        let samples = (0..spec.samples_per_class).map(|_| draw(&mut rng, mean)).collect();
        classes.push(ClassSamples {
            class: a as u32 + 1,
            samples,
        });
    }

    Ok(SyntheticPool {
        pool: Pool { dim: d, classes },
        subcluster_means,
        anomaly_means,
        normal_subcluster,
    })
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
