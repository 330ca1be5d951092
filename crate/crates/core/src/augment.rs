//! Vector-space augmentations: weak views for contrastive pairs, shifting
//! transformations whose identity the model learns to predict, and strong
//! distortions that act as tentative anomalies for early stopping.

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ElsaError, Result};
use crate::mathcore::{dot, ensure_finite, gemm, Tensor2};

/// Small, identity-preserving perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakAugConfig {
    pub noise_sigma: f64,
    pub mask_fraction: f64,
    /// Inclusive range the per-sample scale factor is drawn from.
    pub scale_jitter: [f64; 2],
}

impl Default for WeakAugConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            mask_fraction: 0.1,
            scale_jitter: [0.9, 1.1],
        }
    }
}

impl WeakAugConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_fraction: 0.0,
            scale_jitter: [1.0, 1.0],
        }
    }

    /// Copy with the noise level multiplied by `std` (configs store noise in
    /// units of the data's standard deviation).
    pub fn scaled_by(&self, std: f64) -> Self {
        Self {
            noise_sigma: self.noise_sigma * std,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            errs.push(format!(
                "augment.weak.noise_sigma must be >= 0 (got {})",
                self.noise_sigma
            ));
        }
        if !(0.0..0.5).contains(&self.mask_fraction) {
            errs.push(format!(
                "augment.weak.mask_fraction must lie in [0, 0.5) (got {})",
                self.mask_fraction
            ));
        }
        let [lo, hi] = self.scale_jitter;
        if !(lo > 0.0 && hi < 2.0 && lo <= hi) {
            errs.push(format!(
                "augment.weak.scale_jitter must satisfy 0 < lo <= hi < 2 (got [{lo}, {hi}])"
            ));
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongOp {
    /// Shuffle the values of a random subset of coordinates.
    Permute,
    /// Negate a random subset of coordinates.
    SignFlip,
    /// Additive Gaussian noise.
    Noise,
    /// Multiply by `extreme_scale` or its reciprocal.
    Scale,
}

/// Content-destroying distortion. The shift transforms are deliberately not
/// part of the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongAugConfig {
    pub ops: Vec<StrongOp>,
    pub n_ops: usize,
    pub apply_probability: f64,
    pub noise_sigma: f64,
    pub permute_fraction: f64,
    pub flip_fraction: f64,
    pub extreme_scale: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            ops: vec![StrongOp::Permute, StrongOp::SignFlip, StrongOp::Noise, StrongOp::Scale],
            n_ops: 3,
            apply_probability: 0.8,
            noise_sigma: 1.5,
            permute_fraction: 0.5,
            flip_fraction: 0.5,
            extreme_scale: 3.0,
        }
    }
}

impl StrongAugConfig {
    pub fn identity() -> Self {
        Self {
            apply_probability: 0.0,
            ..Default::default()
        }
    }

    pub fn scaled_by(&self, std: f64) -> Self {
        Self {
            noise_sigma: self.noise_sigma * std,
            ..self.clone()
        }
    }

    pub fn validate(&self, weak: &WeakAugConfig) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.apply_probability) {
            errs.push(format!(
                "augment.strong.apply_probability must lie in [0, 1] (got {})",
                self.apply_probability
            ));
        }
        if self.apply_probability > 0.0 && (self.ops.is_empty() || self.n_ops == 0) {
            errs.push("augment.strong needs a nonempty op pool and n_ops >= 1".to_string());
        }
        if !(self.noise_sigma >= 4.0 * weak.noise_sigma) {
            errs.push(format!(
                "augment.strong.noise_sigma ({}) must be at least 4x augment.weak.noise_sigma ({})",
                self.noise_sigma, weak.noise_sigma
            ));
        }
        for (name, v) in [
            ("permute_fraction", self.permute_fraction),
            ("flip_fraction", self.flip_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("augment.strong.{name} must lie in [0, 1] (got {v})"));
            }
        }
        if !(self.extreme_scale >= 1.0 && self.extreme_scale.is_finite()) {
            errs.push(format!(
                "augment.strong.extreme_scale must be >= 1 (got {})",
                self.extreme_scale
            ));
        }
        errs
    }
}

pub fn weak(x: &[f64], cfg: &WeakAugConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    ensure_finite(x, "weak augmentation input")?;
    let [lo, hi] = cfg.scale_jitter;
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut y: Vec<f64> = if cfg.noise_sigma > 0.0 {
        x.iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                s * v + cfg.noise_sigma * z
            })
            .collect()
    } else {
        x.iter().map(|v| s * v).collect()
    };
    let n_mask = (cfg.mask_fraction * x.len() as f64).floor() as usize;
    if n_mask > 0 {
        for i in index::sample(rng, x.len(), n_mask) {
            y[i] = 0.0;
        }
    }
    Ok(y)
}

pub fn strong(x: &[f64], cfg: &StrongAugConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    ensure_finite(x, "strong augmentation input")?;
    let mut y = x.to_vec();
    if cfg.apply_probability <= 0.0 || cfg.ops.is_empty() {
        return Ok(y);
    }
    let d = y.len();
    for _ in 0..cfg.n_ops {
        let op = *cfg.ops.choose(rng).expect("nonempty op pool");
        if !rng.random_bool(cfg.apply_probability) {
            continue;
        }
        match op {
            StrongOp::Permute => {
                let n = ((cfg.permute_fraction * d as f64).round() as usize).min(d);
                if n >= 2 {
                    let chosen = index::sample(rng, d, n).into_vec();
                    let mut vals: Vec<f64> = chosen.iter().map(|&i| y[i]).collect();
                    vals.shuffle(rng);
                    for (i, v) in chosen.into_iter().zip(vals) {
                        y[i] = v;
                    }
                }
            }
            StrongOp::SignFlip => {
                let n = ((cfg.flip_fraction * d as f64).round() as usize).min(d);
                for i in index::sample(rng, d, n) {
                    y[i] = -y[i];
                }
            }
            StrongOp::Noise => {
                for v in y.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += cfg.noise_sigma * z;
                }
            }
            StrongOp::Scale => {
                let f = if rng.random_bool(0.5) {
                    cfg.extreme_scale
                } else {
                    1.0 / cfg.extreme_scale
                };
                y.iter_mut().for_each(|v| *v *= f);
            }
        }
    }
    Ok(y)
}

/// Fixed family of orthogonal maps; slot 0 is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftFamily {
    dim: usize,
    matrices: Vec<Tensor2>,
    seed: u64,
}

const ORTHO_TOL: f64 = 1e-9;

impl ShiftFamily {
    /// `count` maps on `dim`-vectors: the identity followed by `count − 1`
    /// Haar-random orthogonal matrices (QR of a Gaussian matrix with the sign
    /// of R's diagonal fixed positive).
    pub fn new(dim: usize, count: usize, seed: u64) -> Result<Self> {
        if dim == 0 || count == 0 {
            return Err(ElsaError::invalid("shift family needs dim >= 1 and count >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrices = vec![identity(dim)];
        for _ in 1..count {
            matrices.push(random_orthogonal(dim, &mut rng));
        }
        let fam = Self { dim, matrices, seed };
        fam.check()?;
        Ok(fam)
    }

    /// Family from explicit matrices; the first must be the identity.
    pub fn from_matrices(matrices: Vec<Tensor2>) -> Result<Self> {
        let dim = matrices
            .first()
            .ok_or_else(|| ElsaError::invalid("shift family needs at least one matrix"))?
            .rows();
        let fam = Self { dim, matrices, seed: 0 };
        fam.check()?;
        Ok(fam)
    }

    fn check(&self) -> Result<()> {
        for (k, q) in self.matrices.iter().enumerate() {
            if q.rows() != self.dim || q.cols() != self.dim {
                return Err(ElsaError::DimensionMismatch {
                    expected: self.dim,
                    got: q.rows().max(q.cols()),
                });
            }
            if k == 0 && q != &identity(self.dim) {
                return Err(ElsaError::invalid("shift slot 0 must be the identity"));
            }
            let err = orthogonality_error(q);
            if !(err < ORTHO_TOL) {
                return Err(ElsaError::invalid(format!(
                    "shift matrix {k} is not orthogonal (|QtQ - I|max = {err:e})"
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.matrices.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self, index: usize) -> &Tensor2 {
        &self.matrices[index]
    }

    pub fn shift(&self, x: &[f64], index: usize) -> Result<Vec<f64>> {
        if index >= self.count() {
            return Err(ElsaError::invalid(format!(
                "shift index {index} out of range (family has {})",
                self.count()
            )));
        }
        if x.len() != self.dim {
            return Err(ElsaError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if index == 0 {
            return Ok(x.to_vec());
        }
        let q = &self.matrices[index];
        Ok(q.iter_rows().map(|row| dot(row, x)).collect())
    }

    /// Applies shift `index` to every row of `xs` (`n×d`), i.e. `xs · Qᵀ`.
    pub fn shift_rows(&self, xs: &Tensor2, index: usize) -> Result<Tensor2> {
        if index >= self.count() {
            return Err(ElsaError::invalid(format!("shift index {index} out of range")));
        }
        if index == 0 {
            return Ok(xs.clone());
        }
        let mut out = Tensor2::zeros(xs.rows(), self.dim);
        gemm(
            false,
            true,
            xs.rows(),
            self.dim,
            self.dim,
            1.0,
            xs.data(),
            self.matrices[index].data(),
            0.0,
            out.data_mut(),
        );
        Ok(out)
    }
}

fn identity(d: usize) -> Tensor2 {
    let mut m = Tensor2::zeros(d, d);
    for i in 0..d {
        m.data_mut()[i * d + i] = 1.0;
    }
    m
}

pub fn orthogonality_error(q: &Tensor2) -> f64 {
    let qtq = q.matmul_tn(q).expect("square matrix");
    let d = q.cols();
    qtq.data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let target = if i / d == i % d { 1.0 } else { 0.0 };
            (v - target).abs()
        })
        .fold(0.0, f64::max)
}

/// Gram–Schmidt (applied twice for stability) on the columns of a Gaussian
/// matrix. The resulting R has a positive diagonal by construction.
fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Tensor2 {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for j in 0..d {
            for _pass in 0..2 {
                for i in 0..j {
                    let (done, rest) = cols.split_at_mut(j);
                    let proj = dot(&done[i], &rest[0]);
                    for (c, q) in rest[0].iter_mut().zip(&done[i]) {
                        *c -= proj * q;
                    }
                }
            }
            let n = dot(&cols[j], &cols[j]).sqrt();
            if n < 1e-10 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|v| *v /= n);
        }
        if ok {
            let mut m = Tensor2::zeros(d, d);
            for (j, col) in cols.iter().enumerate() {
                for (i, v) in col.iter().enumerate() {
                    m.data_mut()[i * d + j] = *v;
                }
            }
            return m;
        }
    }
}
