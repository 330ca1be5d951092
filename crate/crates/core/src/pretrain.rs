//! Contrastive pre-training of the encoder.
//!
//! Each anchor's positive is the other view of the same instance; the
//! denominator runs over every embedding in the doubled batch except the
//! anchor itself, positive included. The loss is averaged over both view
//! directions. With shift prediction on, every base sample is expanded into
//! one instance per shift and a cross-entropy on the shift head is added.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{weak, ShiftFamily, WeakAugConfig};
use crate::data::{Dataset, SemiLabel};
use crate::encoder::EncoderParams;
use crate::error::{ElsaError, Result};
use crate::mathcore::{gemm, logsumexp_unchecked, softmax_with_lse, Tensor2};
use crate::objective::loss_shift;
use crate::optim::{LrSchedule, Sgd};

/// Two views of the same `m` instances, row `i` of each view paired.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    view1: Tensor2,
    view2: Tensor2,
    tau: f64,
}

impl ContrastiveBatch {
    pub fn new(view1: Tensor2, view2: Tensor2, tau: f64) -> Result<Self> {
        if view1.rows() != view2.rows() || view1.cols() != view2.cols() {
            return Err(ElsaError::invalid(format!(
                "contrastive views differ in shape: {}x{} vs {}x{}",
                view1.rows(),
                view1.cols(),
                view2.rows(),
                view2.cols()
            )));
        }
        if view1.rows() < 2 {
            return Err(ElsaError::invalid(
                "contrastive batch needs m >= 2 (no negatives exist)",
            ));
        }
        if !(tau > 0.0) {
            return Err(ElsaError::invalid(format!("tau must be > 0, got {tau}")));
        }
        Ok(Self { view1, view2, tau })
    }

    /// Builds a batch from `2m` stacked rows: the first `m` are view one.
    pub fn from_stacked(z: &Tensor2, tau: f64) -> Result<Self> {
        if !z.rows().is_multiple_of(2) {
            return Err(ElsaError::invalid("stacked contrastive batch needs an even row count"));
        }
        let m = z.rows() / 2;
        let (a, b) = z.data().split_at(m * z.cols());
        Self::new(
            Tensor2::new(m, z.cols(), a.to_vec())?,
            Tensor2::new(m, z.cols(), b.to_vec())?,
            tau,
        )
    }

    pub fn m(&self) -> usize {
        self.view1.rows()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn stacked(&self) -> Tensor2 {
        let mut data = self.view1.data().to_vec();
        data.extend_from_slice(self.view2.data());
        Tensor2::new(2 * self.m(), self.view1.cols(), data).expect("shapes checked")
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub align: f64,
    pub uniform: f64,
    /// Gradient w.r.t. the stacked embeddings `[view1; view2]`.
    pub grad: Tensor2,
}

/// Contrastive loss and its gradient w.r.t. both views' embeddings.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<ContrastiveOutput> {
    let z = batch.stacked();
    let n = z.rows();
    let m = batch.m();
    let inv_tau = 1.0 / batch.tau;
    let mut w = Tensor2::zeros(n, n);
    gemm(
        false,
        true,
        n,
        n,
        z.cols(),
        inv_tau,
        z.data(),
        z.data(),
        0.0,
        w.data_mut(),
    );
    let (mut align, mut uniform) = (0.0, 0.0);
    for i in 0..n {
        let pos = (i + m) % n;
        let row = w.row_mut(i);
        align -= row[pos];
        row[i] = f64::NEG_INFINITY;
        let lse = logsumexp_unchecked(row);
        uniform += lse;
        // Row becomes dL/dsim_i· = (softmax − onehot(pos)) / n.
        softmax_with_lse(row, lse);
        row[pos] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    align /= n as f64;
    uniform /= n as f64;
    if !(align.is_finite() && uniform.is_finite()) {
        return Err(ElsaError::NonFinite {
            context: "contrastive loss",
        });
    }
    // sim = Z Zᵀ / τ  ⇒  dZ = (G + Gᵀ) Z / τ
    let mut grad = Tensor2::zeros(n, z.cols());
    gemm(
        false,
        false,
        n,
        z.cols(),
        n,
        inv_tau,
        w.data(),
        z.data(),
        0.0,
        grad.data_mut(),
    );
    gemm(
        true,
        false,
        n,
        z.cols(),
        n,
        inv_tau,
        w.data(),
        z.data(),
        1.0,
        grad.data_mut(),
    );
    Ok(ContrastiveOutput {
        loss: align + uniform,
        align,
        uniform,
        grad,
    })
}

/// `(L_align, L_uniform)`: the negated positive similarity and the
/// log-partition over all non-anchor embeddings, each averaged over anchors.
pub fn decompose_loss(batch: &ContrastiveBatch) -> Result<(f64, f64)> {
    let out = contrastive_loss(batch)?;
    Ok((out.align, out.uniform))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Instances per contrastive batch (after shift expansion).
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub tau: f64,
    /// Add the shift-prediction loss (requires at least two shifts).
    pub shift_loss: bool,
    /// Training samples used for the per-epoch probe metrics.
    pub probe_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 0.05,
            lr_schedule: LrSchedule::default(),
            momentum: 0.9,
            tau: 0.5,
            shift_loss: true,
            probe_size: 256,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size < 2 {
            v.push(format!("pretrain.batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0) {
            v.push(format!("pretrain.lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("pretrain.momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.tau > 0.0) {
            v.push(format!("pretrain.tau must be > 0, got {}", self.tau));
        }
        if self.probe_size < 2 {
            v.push(format!("pretrain.probe_size must be >= 2, got {}", self.probe_size));
        }
        v
    }
}

/// Per-epoch pre-training metrics. Epoch 0 is the untrained state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches (0 at epoch 0).
    pub train_loss: f64,
    pub train_shift_loss: f64,
    /// Contrastive loss on a fixed, pre-augmented probe batch.
    pub probe_loss: f64,
    /// Mean over probe samples of `log Σ_{j≠i} exp(sim(u_i, u_j))`.
    pub mean_s_cont: f64,
    /// `−mean_s_cont`: the contrastive energy, which training drives up.
    pub uniformity_energy: f64,
    /// Shift-head accuracy on the probe samples (absent without shift loss).
    pub shift_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub records: Vec<PretrainRecord>,
    /// Ids of every sample that fed a gradient step, sorted.
    pub used_ids: Vec<u64>,
    /// Position of the training generator after the last epoch.
    pub rng_word_pos: u128,
}

/// Rows of `train` that pre-training may use: everything but labeled anomalies.
pub fn pretrain_pool(train: &Dataset) -> (Vec<u64>, Tensor2) {
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for s in train.samples() {
        if s.semi != SemiLabel::LabeledAnomaly {
            ids.push(s.id);
            data.extend_from_slice(&s.features);
        }
    }
    let rows = ids.len();
    (
        ids,
        Tensor2::new(rows, train.dim(), data).expect("rows have dataset dim"),
    )
}

/// Mean over rows of `log Σ_{j≠i} exp(u_i·u_j)`.
pub fn mean_uniformity_score(u: &Tensor2) -> f64 {
    let n = u.rows();
    let mut sims = Tensor2::zeros(n, n);
    gemm(
        false,
        true,
        n,
        n,
        u.cols(),
        1.0,
        u.data(),
        u.data(),
        0.0,
        sims.data_mut(),
    );
    let mut total = 0.0;
    for i in 0..n {
        let row = sims.row_mut(i);
        row[i] = f64::NEG_INFINITY;
        total += logsumexp_unchecked(row);
    }
    total / n as f64
}

/// Fraction of `(x, k)` pairs whose shift the head predicts correctly.
pub fn shift_accuracy(encoder: &EncoderParams, xs: &Tensor2, shifts: &ShiftFamily) -> Result<f64> {
    let mut correct = 0usize;
    for k in 0..shifts.count() {
        let logits = encoder.forward(&shifts.shift_rows(xs, k)?)?.logits;
        for row in logits.iter_rows() {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (j, &v)| if v > a.1 { (j, v) } else { a })
                .0;
            correct += (arg == k) as usize;
        }
    }
    Ok(correct as f64 / (xs.rows() * shifts.count()) as f64)
}

/// Two weak views of every `(row, shift)` instance, shift-major within each
/// row. Returns `[view1; view2]` stacked and each instance's shift id.
pub(crate) fn expand_views(
    xs: &[&[f64]],
    shifts: &ShiftFamily,
    weak_cfg: &WeakAugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor2, Vec<usize>)> {
    let k = shifts.count();
    let d = shifts.dim();
    let n = xs.len() * k;
    let mut v1 = Vec::with_capacity(n * d);
    let mut v2 = Vec::with_capacity(n * d);
    let mut ids = Vec::with_capacity(n);
    for x in xs {
        for s in 0..k {
            let shifted = shifts.shift(x, s)?;
            v1.extend(weak(&shifted, weak_cfg, rng)?);
            v2.extend(weak(&shifted, weak_cfg, rng)?);
            ids.push(s);
        }
    }
    v1.extend(v2);
    Ok((Tensor2::new(2 * n, d, v1)?, ids))
}

struct Probe {
    raw: Tensor2,
    views: Tensor2,
}

impl Probe {
    fn record(
        &self,
        encoder: &EncoderParams,
        shifts: &ShiftFamily,
        cfg: &PretrainConfig,
        epoch: usize,
        train_loss: f64,
        train_shift_loss: f64,
        with_shift: bool,
    ) -> Result<PretrainRecord> {
        let u = encoder.embed_rows(&self.views)?;
        let probe_loss = contrastive_loss(&ContrastiveBatch::from_stacked(&u, cfg.tau)?)?.loss;
        let mean_s_cont = mean_uniformity_score(&encoder.embed_rows(&self.raw)?);
        let shift_accuracy = if with_shift {
            Some(shift_accuracy(encoder, &self.raw, shifts)?)
        } else {
            None
        };
        Ok(PretrainRecord {
            epoch,
            train_loss,
            train_shift_loss,
            probe_loss,
            mean_s_cont,
            uniformity_energy: -mean_s_cont,
            shift_accuracy,
        })
    }
}

/// Pre-trains `encoder` in place on the unlabeled and labeled-normal rows of
/// `train`, with SGD + momentum under the configured
/// learning-rate schedule.
pub fn pretrain_loop(
    encoder: &mut EncoderParams,
    train: &Dataset,
    shifts: &ShiftFamily,
    weak_cfg: &WeakAugConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(ElsaError::Validation(problems));
    }
    if shifts.dim() != train.dim() {
        return Err(ElsaError::DimensionMismatch {
            expected: shifts.dim(),
            got: train.dim(),
        });
    }
    let (ids, xs) = pretrain_pool(train);
    if xs.rows() < 2 {
        return Err(ElsaError::invalid("pre-training needs at least 2 usable samples"));
    }
    let k = shifts.count();
    let with_shift = cfg.shift_loss && k >= 2;
    let base_per_batch = (cfg.batch_size / k).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let probe = {
        let mut order: Vec<usize> = (0..xs.rows()).collect();
        order.shuffle(&mut rng);
        order.truncate(cfg.probe_size.min(xs.rows()));
        order.sort_unstable();
        let rows: Vec<&[f64]> = order.iter().map(|&i| xs.row(i)).collect();
        let raw = Tensor2::from_rows(&rows)?;
        let per = (cfg.batch_size / k).max(2).min(rows.len());
        let (views, _) = expand_views(&rows[..per], shifts, weak_cfg, &mut rng)?;
        Probe { raw, views }
    };

    let mut records = vec![probe.record(encoder, shifts, cfg, 0, 0.0, 0.0, with_shift)?];
    let mut opt = Sgd::new(encoder.num_params(), cfg.lr, cfg.momentum);
    let mut used = vec![false; xs.rows()];
    let mut order: Vec<usize> = (0..xs.rows()).collect();
    for epoch in 1..=cfg.epochs {
        opt.lr = cfg.lr_schedule.rate(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut shift_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(base_per_batch) {
            if chunk.len() * k < 2 {
                continue;
            }
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| xs.row(i)).collect();
            let (views, shift_ids) = expand_views(&rows, shifts, weak_cfg, &mut rng)?;
            let cache = encoder.forward(&views)?;
            let batch = ContrastiveBatch::from_stacked(&cache.embedding, cfg.tau)?;
            let cl = contrastive_loss(&batch)?;
            debug_assert!((cl.loss - (cl.align + cl.uniform)).abs() < 1e-12);
            let mut total = cl.loss;
            let grad_logits = if with_shift {
                let ids2: Vec<usize> = shift_ids.iter().chain(&shift_ids).copied().collect();
                let (ls, g) = loss_shift(&cache.logits, &ids2)?;
                total += ls;
                shift_sum += ls;
                Some(g)
            } else {
                None
            };
            let grad = encoder.backward(&cache, Some(&cl.grad), grad_logits.as_ref());
            crate::mathcore::ensure_finite(&grad, "pre-training gradient")?;
            opt.step(encoder.as_mut_slice(), &grad);
            for &i in chunk {
                used[i] = true;
            }
            loss_sum += total;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        records.push(probe.record(encoder, shifts, cfg, epoch, loss_sum / nb, shift_sum / nb, with_shift)?);
    }
    let mut used_ids: Vec<u64> = ids.iter().zip(&used).filter(|(_, &u)| u).map(|(&id, _)| id).collect();
    used_ids.sort_unstable();
    Ok(PretrainReport {
        records,
        used_ids,
        rng_word_pos: rng.get_word_pos(),
    })
}
