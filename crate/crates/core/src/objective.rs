//! Score functions and fine-tuning losses, each with its analytic gradient.
//!
//! Scores map a unit embedding to a normality value (higher = more normal):
//! the prototype energy score `S = log Σ_p exp(sim(e, p) / τ)`, the
//! nearest-prototype cosine, and the uniformity energy taken over a reference
//! set. Losses consume per-sample scores plus semi-labels and return the
//! gradient w.r.t. those scores; the score backward passes carry it on to the
//! embeddings.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{weak, ShiftFamily, WeakAugConfig};
use crate::data::SemiLabel;
use crate::encoder::EncoderParams;
use crate::error::{ElsaError, Result};
use crate::mathcore::{dot, gemm, logsumexp, logsumexp_unchecked, softmax_with_lse, Tensor2};

/// How the normalization constant `C` of the energy losses is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CMode {
    /// `ln|P| + 1/τ`, the score's maximum (every similarity equal to 1).
    #[default]
    Analytic,
    /// `ln(|P| + 1/τ)`, as the reference pseudocode literally writes it.
    Appendix,
}

impl FromStr for CMode {
    type Err = ElsaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(CMode::Analytic),
            "appendix" => Ok(CMode::Appendix),
            _ => Err(ElsaError::invalid(format!("unknown c-mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub tau: f64,
    pub prototype_count: usize,
    pub c_mode: CMode,
}

impl ScoreConfig {
    pub fn c(&self) -> f64 {
        normalization_constant(self.prototype_count, self.tau, self.c_mode)
    }

    /// Whether every energy score is strictly positive: `ln|P| > 1/τ`.
    pub fn scores_positive(&self) -> bool {
        (self.prototype_count as f64).ln() > 1.0 / self.tau
    }
}

pub fn normalization_constant(prototype_count: usize, tau: f64, mode: CMode) -> f64 {
    let k = prototype_count as f64;
    match mode {
        CMode::Analytic => k.ln() + 1.0 / tau,
        CMode::Appendix => (k + 1.0 / tau).ln(),
    }
}

/// Per-term decomposition of a fine-tuning loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub anomaly_term: f64,
    pub normal_term: f64,
    pub shift_term: f64,
}

// ---------------------------------------------------------------------------
// Single-embedding scores

fn check_prototypes(e: &[f64], prototypes: &Tensor2) -> Result<()> {
    if prototypes.rows() == 0 {
        return Err(ElsaError::invalid("prototype set is empty"));
    }
    if prototypes.cols() != e.len() {
        return Err(ElsaError::DimensionMismatch {
            expected: prototypes.cols(),
            got: e.len(),
        });
    }
    Ok(())
}

fn prototype_logits(e: &[f64], prototypes: &Tensor2, tau: f64) -> Vec<f64> {
    prototypes.iter_rows().map(|p| dot(e, p) / tau).collect()
}

/// Softmax over prototypes of `sim(e, p) / τ`.
pub fn prototype_posterior(e: &[f64], prototypes: &Tensor2, tau: f64) -> Result<Vec<f64>> {
    check_prototypes(e, prototypes)?;
    let mut logits = prototype_logits(e, prototypes, tau);
    let lse = logsumexp(&logits)?;
    softmax_with_lse(&mut logits, lse);
    Ok(logits)
}

/// `S(e) = log Σ_p exp(sim(e, p) / τ)`.
pub fn energy_score(e: &[f64], prototypes: &Tensor2, tau: f64) -> Result<f64> {
    check_prototypes(e, prototypes)?;
    logsumexp(&prototype_logits(e, prototypes, tau))
}

/// Similarity to the nearest prototype.
pub fn score_cosine(e: &[f64], prototypes: &Tensor2) -> Result<f64> {
    check_prototypes(e, prototypes)?;
    Ok(prototypes
        .iter_rows()
        .map(|p| dot(e, p))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// `log Σ_{r ∈ R, r ≠ e} exp(sim(e, r))`. Rows of `reference` identical to `e`
/// are excluded.
pub fn score_uniformity(e: &[f64], reference: &Tensor2) -> Result<f64> {
    if reference.rows() > 0 && reference.cols() != e.len() {
        return Err(ElsaError::DimensionMismatch {
            expected: reference.cols(),
            got: e.len(),
        });
    }
    let sims: Vec<f64> = reference.iter_rows().filter(|r| *r != e).map(|r| dot(e, r)).collect();
    if sims.is_empty() {
        return Err(ElsaError::invalid("uniformity score needs a nonempty reference set"));
    }
    logsumexp(&sims)
}

// ---------------------------------------------------------------------------
// Losses on scores

fn check_scores(scores: &[f64], semis: &[SemiLabel]) -> Result<()> {
    if scores.len() != semis.len() {
        return Err(ElsaError::DimensionMismatch {
            expected: scores.len(),
            got: semis.len(),
        });
    }
    if scores.is_empty() {
        return Err(ElsaError::EmptyReduction);
    }
    crate::mathcore::ensure_finite(scores, "loss scores")
}

/// Batch mean of `1/(C − S)` over labeled anomalies and `1/S` over everything
/// else, with its gradient w.r.t. the scores.
pub fn loss_elsa(scores: &[f64], semis: &[SemiLabel], c: f64) -> Result<(LossBreakdown, Vec<f64>)> {
    check_scores(scores, semis)?;
    let n = scores.len() as f64;
    let mut out = LossBreakdown::default();
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, semi) in scores.iter().zip(semis) {
        if !(s > 0.0 && s < c) {
            return Err(ElsaError::ScoreOutOfDomain { score: s, c });
        }
        if semi.is_anomaly() {
            let r = 1.0 / (c - s);
            out.anomaly_term += r / n;
            grad.push(r * r / n);
        } else {
            let r = 1.0 / s;
            out.normal_term += r / n;
            grad.push(-r * r / n);
        }
    }
    out.total = out.anomaly_term + out.normal_term;
    Ok((out, grad))
}

/// Batch mean of `S` over labeled anomalies and `−S` over everything else.
pub fn loss_naive(scores: &[f64], semis: &[SemiLabel]) -> Result<(LossBreakdown, Vec<f64>)> {
    check_scores(scores, semis)?;
    let n = scores.len() as f64;
    let mut out = LossBreakdown::default();
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, semi) in scores.iter().zip(semis) {
        if semi.is_anomaly() {
            out.anomaly_term += s / n;
            grad.push(1.0 / n);
        } else {
            out.normal_term -= s / n;
            grad.push(-1.0 / n);
        }
    }
    out.total = out.anomaly_term + out.normal_term;
    Ok((out, grad))
}

/// Batch mean of `1/(C − S)` over labeled anomalies and `−S` over everything
/// else.
pub fn loss_deepsad(scores: &[f64], semis: &[SemiLabel], c: f64) -> Result<(LossBreakdown, Vec<f64>)> {
    check_scores(scores, semis)?;
    let n = scores.len() as f64;
    let mut out = LossBreakdown::default();
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, semi) in scores.iter().zip(semis) {
        if semi.is_anomaly() {
            if !(s < c) {
                return Err(ElsaError::ScoreOutOfDomain { score: s, c });
            }
            let r = 1.0 / (c - s);
            out.anomaly_term += r / n;
            grad.push(r * r / n);
        } else {
            out.normal_term -= s / n;
            grad.push(-1.0 / n);
        }
    }
    out.total = out.anomaly_term + out.normal_term;
    Ok((out, grad))
}

/// Mean softmax cross-entropy of `logits` rows against `ids`, with the
/// gradient w.r.t. the logits.
pub fn loss_shift(logits: &Tensor2, ids: &[usize]) -> Result<(f64, Tensor2)> {
    if logits.rows() != ids.len() {
        return Err(ElsaError::DimensionMismatch {
            expected: logits.rows(),
            got: ids.len(),
        });
    }
    if ids.is_empty() {
        return Err(ElsaError::EmptyReduction);
    }
    let k = logits.cols();
    let n = ids.len() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, &y) in ids.iter().enumerate() {
        if y >= k {
            return Err(ElsaError::invalid(format!("shift id {y} out of range (K = {k})")));
        }
        let row = grad.row_mut(i);
        let lse = logsumexp(row)?;
        loss += (lse - row[y]) / n;
        softmax_with_lse(row, lse);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Named score / loss selection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Energy,
    Cosine,
    Uniformity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Elsa,
    Naive,
    Deepsad,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Energy => "energy",
            ScoreKind::Cosine => "cosine",
            ScoreKind::Uniformity => "uniformity",
        })
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Elsa => "elsa",
            LossKind::Naive => "naive",
            LossKind::Deepsad => "deepsad",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = ElsaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(ScoreKind::Energy),
            "cosine" => Ok(ScoreKind::Cosine),
            "uniformity" => Ok(ScoreKind::Uniformity),
            _ => Err(ElsaError::invalid(format!("unknown score function '{s}'"))),
        }
    }
}

impl FromStr for LossKind {
    type Err = ElsaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elsa" => Ok(LossKind::Elsa),
            "naive" => Ok(LossKind::Naive),
            "deepsad" => Ok(LossKind::Deepsad),
            _ => Err(ElsaError::invalid(format!("unknown loss '{s}'"))),
        }
    }
}

impl LossKind {
    pub fn evaluate(self, scores: &[f64], semis: &[SemiLabel], c: f64) -> Result<(LossBreakdown, Vec<f64>)> {
        match self {
            LossKind::Elsa => loss_elsa(scores, semis, c),
            LossKind::Naive => loss_naive(scores, semis),
            LossKind::Deepsad => loss_deepsad(scores, semis, c),
        }
    }
}

// ---------------------------------------------------------------------------
// Batched training scores with backward passes

/// Intermediate weights of a batched training score, needed by its backward.
#[derive(Debug, Clone)]
pub struct TrainScores {
    pub scores: Vec<f64>,
    /// Energy: prototype posterior (n×k). Cosine: one-hot argmax (n×k).
    /// Uniformity: in-batch softmax weights (n×n, zero diagonal).
    weights: Tensor2,
}

/// Training-time score of every row of `u` (unit embeddings).
///
/// * energy: `log Σ_p exp(u·p / τ)`;
/// * cosine: `1 + max_p u·p`, shifted into `[0, 2]` so the inverse-form
///   losses see a positive score;
/// * uniformity: `log Σ_{j≠i} exp(u_i·u_j)` over the other rows of the batch.
pub fn train_scores(kind: ScoreKind, u: &Tensor2, prototypes: &Tensor2, tau: f64) -> Result<TrainScores> {
    let n = u.rows();
    match kind {
        ScoreKind::Energy | ScoreKind::Cosine => {
            if prototypes.rows() == 0 {
                return Err(ElsaError::invalid("prototype set is empty"));
            }
            let k = prototypes.rows();
            let mut w = Tensor2::zeros(n, k);
            let scale = if kind == ScoreKind::Energy { 1.0 / tau } else { 1.0 };
            gemm(
                false,
                true,
                n,
                k,
                u.cols(),
                scale,
                u.data(),
                prototypes.data(),
                0.0,
                w.data_mut(),
            );
            let mut scores = Vec::with_capacity(n);
            for i in 0..n {
                let row = w.row_mut(i);
                if kind == ScoreKind::Energy {
                    let lse = logsumexp_unchecked(row);
                    softmax_with_lse(row, lse);
                    scores.push(lse);
                } else {
                    let (arg, max) = row
                        .iter()
                        .copied()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |a, (j, v)| if v > a.1 { (j, v) } else { a });
                    row.iter_mut().for_each(|v| *v = 0.0);
                    row[arg] = 1.0;
                    scores.push(1.0 + max);
                }
            }
            Ok(TrainScores { scores, weights: w })
        }
        ScoreKind::Uniformity => {
            if n < 2 {
                return Err(ElsaError::invalid("uniformity score needs a batch of at least 2"));
            }
            let mut w = Tensor2::zeros(n, n);
            gemm(false, true, n, n, u.cols(), 1.0, u.data(), u.data(), 0.0, w.data_mut());
            let mut scores = Vec::with_capacity(n);
            for i in 0..n {
                let row = w.row_mut(i);
                row[i] = f64::NEG_INFINITY;
                let lse = logsumexp_unchecked(row);
                softmax_with_lse(row, lse);
                scores.push(lse);
            }
            Ok(TrainScores { scores, weights: w })
        }
    }
}

/// Pulls `dL/dS` back to `dL/du` for scores produced by [`train_scores`].
pub fn train_scores_backward(
    kind: ScoreKind,
    u: &Tensor2,
    prototypes: &Tensor2,
    tau: f64,
    ts: &TrainScores,
    grad_scores: &[f64],
) -> Tensor2 {
    let n = u.rows();
    let z = u.cols();
    let mut g = ts.weights.clone();
    for (i, gs) in grad_scores.iter().enumerate() {
        g.row_mut(i).iter_mut().for_each(|v| *v *= gs);
    }
    let mut out = Tensor2::zeros(n, z);
    match kind {
        ScoreKind::Energy | ScoreKind::Cosine => {
            let scale = if kind == ScoreKind::Energy { 1.0 / tau } else { 1.0 };
            gemm(
                false,
                false,
                n,
                z,
                prototypes.rows(),
                scale,
                g.data(),
                prototypes.data(),
                0.0,
                out.data_mut(),
            );
        }
        ScoreKind::Uniformity => {
            // dU = (G + Gᵀ) U with G = diag(dS) · W
            gemm(false, false, n, z, n, 1.0, g.data(), u.data(), 0.0, out.data_mut());
            gemm(true, false, n, z, n, 1.0, g.data(), u.data(), 1.0, out.data_mut());
        }
    }
    out
}

/// Upper end `C` of the training score's range for the inverse-form losses.
pub fn train_score_max(kind: ScoreKind, prototype_count: usize, batch_rows: usize, tau: f64, c_mode: CMode) -> f64 {
    match kind {
        ScoreKind::Energy => normalization_constant(prototype_count, tau, c_mode),
        ScoreKind::Cosine => 2.0,
        ScoreKind::Uniformity => ((batch_rows.max(2) - 1) as f64).ln() + 1.0,
    }
}

// ---------------------------------------------------------------------------
// Evaluation-time scoring

/// Evaluation score over unit embeddings.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    Energy {
        prototypes: &'a Tensor2,
        tau: f64,
    },
    Cosine {
        prototypes: &'a Tensor2,
    },
    /// Uniformity energy against a reference set of embeddings.
    Uniformity {
        reference: &'a Tensor2,
    },
}

impl Scorer<'_> {
    pub fn score_rows(&self, u: &Tensor2) -> Result<Vec<f64>> {
        let (bank, scale) = match *self {
            Scorer::Energy { prototypes, tau } => (prototypes, 1.0 / tau),
            Scorer::Cosine { prototypes } => (prototypes, 1.0),
            Scorer::Uniformity { reference } => (reference, 1.0),
        };
        if bank.rows() == 0 {
            return Err(ElsaError::invalid("scoring needs a nonempty prototype/reference set"));
        }
        if bank.cols() != u.cols() {
            return Err(ElsaError::DimensionMismatch {
                expected: bank.cols(),
                got: u.cols(),
            });
        }
        let n = u.rows();
        let k = bank.rows();
        let mut sims = Tensor2::zeros(n, k);
        gemm(
            false,
            true,
            n,
            k,
            u.cols(),
            scale,
            u.data(),
            bank.data(),
            0.0,
            sims.data_mut(),
        );
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = sims.row_mut(i);
            let s = match self {
                Scorer::Cosine { .. } => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Scorer::Energy { .. } => logsumexp_unchecked(row),
                Scorer::Uniformity { reference } => {
                    // Exclude reference rows identical to the query.
                    let q = u.row(i);
                    let mut kept = Vec::with_capacity(k);
                    for (j, r) in reference.iter_rows().enumerate() {
                        if r != q {
                            kept.push(row[j]);
                        }
                    }
                    if kept.is_empty() {
                        return Err(ElsaError::invalid("uniformity score needs a nonempty reference set"));
                    }
                    logsumexp_unchecked(&kept)
                }
            };
            out.push(s);
        }
        Ok(out)
    }
}

/// How ensemble members are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    /// Mean of per-view scores over weak draws and shifts.
    #[default]
    Expectation,
    /// Mean embedding over weak draws per shift, then the sum over shifts of
    /// `log Σ_p exp(z̄·p)` (no temperature), as the reference test routine does.
    Appendix,
}

/// Ensembled normality score of a single raw sample.
#[allow(clippy::too_many_arguments)]
pub fn score_ensemble(
    x: &[f64],
    encoder: &EncoderParams,
    shifts: &ShiftFamily,
    weak_cfg: &WeakAugConfig,
    scorer: Scorer<'_>,
    n_samples: usize,
    mode: EnsembleMode,
    rng: &mut impl Rng,
) -> Result<f64> {
    let xs = Tensor2::new(1, x.len(), x.to_vec())?;
    Ok(ensemble_scores(&xs, encoder, shifts, weak_cfg, scorer, n_samples, mode, rng)?[0])
}

/// Ensembled normality scores of every row of `xs`.
///
/// Views are generated sample by sample (draw-major, then shift), so results
/// depend only on the RNG state and the row order.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_scores(
    xs: &Tensor2,
    encoder: &EncoderParams,
    shifts: &ShiftFamily,
    weak_cfg: &WeakAugConfig,
    scorer: Scorer<'_>,
    n_samples: usize,
    mode: EnsembleMode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(ElsaError::invalid("ensemble needs n_samples >= 1"));
    }
    let prototypes = match (mode, scorer) {
        (EnsembleMode::Appendix, Scorer::Energy { prototypes, .. }) => Some(prototypes),
        (EnsembleMode::Appendix, _) => {
            return Err(ElsaError::invalid(
                "appendix ensemble mode is defined for the energy score only",
            ))
        }
        _ => None,
    };
    let k = shifts.count();
    let views_per_sample = n_samples * k;
    const CHUNK: usize = 128;
    let d = xs.cols();
    let mut out = Vec::with_capacity(xs.rows());
    let mut start = 0;
    while start < xs.rows() {
        let end = (start + CHUNK).min(xs.rows());
        let mut views = Vec::with_capacity((end - start) * views_per_sample * d);
        for i in start..end {
            let shifted: Vec<Vec<f64>> = (0..k).map(|s| shifts.shift(xs.row(i), s)).collect::<Result<_>>()?;
            for _ in 0..n_samples {
                for sx in &shifted {
                    views.extend(weak(sx, weak_cfg, rng)?);
                }
            }
        }
        let views = Tensor2::new((end - start) * views_per_sample, d, views)?;
        let u = encoder.embed_rows(&views)?;
        match prototypes {
            None => {
                let s = scorer.score_rows(&u)?;
                for chunk in s.chunks_exact(views_per_sample) {
                    out.push(chunk.iter().sum::<f64>() / views_per_sample as f64);
                }
            }
            Some(p) => {
                let z = u.cols();
                for i in 0..end - start {
                    let mut total = 0.0;
                    for s in 0..k {
                        let mut mean = vec![0.0; z];
                        for draw in 0..n_samples {
                            let row = u.row(i * views_per_sample + draw * k + s);
                            for (m, v) in mean.iter_mut().zip(row) {
                                *m += v / n_samples as f64;
                            }
                        }
                        total += energy_score(&mean, p, 1.0)?;
                    }
                    out.push(total);
                }
            }
        }
        start = end;
    }
    Ok(out)
}
