//! Energy-based fine-tuning with prototype refresh and label-free early
//! stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::auroc;
use crate::augment::{strong, weak, ShiftFamily, StrongAugConfig, WeakAugConfig};
use crate::data::{Dataset, SemiLabel};
use crate::encoder::EncoderParams;
use crate::error::{ElsaError, Result};
use crate::mathcore::{gemm, logsumexp_unchecked, Tensor2};
use crate::objective::{
    loss_shift, train_score_max, train_scores, train_scores_backward, CMode, LossBreakdown, LossKind, ScoreKind,
};
use crate::optim::Adam;
use crate::pretrain::expand_views;
use crate::prototypes::{refresh, PrototypeSet};

/// Per-view early-stop score: for each shift, `log Σ_p exp(u·p)` of the
/// shifted view's embedding, summed over shifts.
fn view_scores(
    encoder: &EncoderParams,
    prototypes: &Tensor2,
    views: &Tensor2,
    shifts: &ShiftFamily,
) -> Result<Vec<f64>> {
    let n = views.rows();
    let k = prototypes.rows();
    let mut total = vec![0.0; n];
    let mut logits = Tensor2::zeros(n, k);
    for s in 0..shifts.count() {
        let u = encoder.embed_rows(&shifts.shift_rows(views, s)?)?;
        gemm(
            false,
            true,
            n,
            k,
            u.cols(),
            1.0,
            u.data(),
            prototypes.data(),
            0.0,
            logits.data_mut(),
        );
        for (t, row) in total.iter_mut().zip(logits.iter_rows()) {
            *t += logsumexp_unchecked(row);
        }
    }
    Ok(total)
}

/// AUROC separating weakly augmented originals (positives) from weakly
/// augmented strong augmentations (negatives) of the validation rows.
pub fn earlystop_score(
    encoder: &EncoderParams,
    prototypes: &Tensor2,
    validation: &Tensor2,
    shifts: &ShiftFamily,
    weak_cfg: &WeakAugConfig,
    strong_cfg: &StrongAugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if validation.rows() == 0 {
        return Err(ElsaError::invalid("early stopping needs a nonempty validation set"));
    }
    let d = validation.cols();
    let mut a = Vec::with_capacity(validation.rows() * d);
    let mut b = Vec::with_capacity(validation.rows() * d);
    for x in validation.iter_rows() {
        a.extend(weak(x, weak_cfg, rng)?);
        b.extend(weak(&strong(x, strong_cfg, rng)?, weak_cfg, rng)?);
    }
    let n = validation.rows();
    let mut scores = view_scores(encoder, prototypes, &Tensor2::new(n, d, a)?, shifts)?;
    scores.extend(view_scores(encoder, prototypes, &Tensor2::new(n, d, b)?, shifts)?);
    let labels: Vec<bool> = (0..2 * n).map(|i| i < n).collect();
    auroc(&scores, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Base samples per batch (each expands to `2 · K_s` views).
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub score: ScoreKind,
    pub loss: LossKind,
    pub c_mode: CMode,
    pub refresh_period: usize,
    pub warm_start: bool,
    pub shift_loss: bool,
    pub seed: u64,
}

/// One row of the fine-tuning trace. Epoch 0 is the state before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub earlystop_auroc: f64,
    pub test_auroc: Option<f64>,
    pub prototype_refresh: bool,
    /// Mean energy score (no augmentation, mean over shifts) of the labeled
    /// anomalies / labeled normals in the training set.
    pub mean_score_labeled_anomaly: Option<f64>,
    pub mean_score_labeled_normal: Option<f64>,
    pub wallclock_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub best_epoch: usize,
    pub best_earlystop: f64,
    pub best_test_auroc: Option<f64>,
    pub encoder: EncoderParams,
    pub prototypes: PrototypeSet,
    pub trace: Vec<MetricsRecord>,
    /// Set when training stopped on a numeric failure.
    pub diverged: Option<String>,
    /// Position of the training generator when the best snapshot was taken.
    pub rng_word_pos: u128,
}

/// Everything the loop reads besides the model.
pub struct FinetuneData<'a> {
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub shifts: &'a ShiftFamily,
    pub weak: &'a WeakAugConfig,
    pub strong: &'a StrongAugConfig,
}

/// Observes the model after each epoch (e.g. test AUROC). Its output is
/// recorded but never feeds a training or selection decision.
pub type Monitor<'m> = dyn FnMut(&EncoderParams, &PrototypeSet) -> Result<f64> + 'm;

/// Rows of `ds` that shape the prototypes: unlabeled and labeled-normal.
pub fn clustering_rows(ds: &Dataset) -> Tensor2 {
    let rows: Vec<&[f64]> = ds
        .samples()
        .iter()
        .filter(|s| s.semi != SemiLabel::LabeledAnomaly)
        .map(|s| s.features.as_slice())
        .collect();
    if rows.is_empty() {
        return Tensor2::zeros(0, ds.dim());
    }
    Tensor2::from_rows(&rows).expect("rows have dataset dim")
}

/// Unaugmented embeddings of every row under every shift, shift-major.
pub fn embed_all_shifts(encoder: &EncoderParams, xs: &Tensor2, shifts: &ShiftFamily) -> Result<Tensor2> {
    let mut data = Vec::with_capacity(xs.rows() * shifts.count() * encoder.dims().embed);
    for s in 0..shifts.count() {
        data.extend(encoder.embed_rows(&shifts.shift_rows(xs, s)?)?.into_data());
    }
    Tensor2::new(xs.rows() * shifts.count(), encoder.dims().embed, data)
}

fn features_of(ds: &Dataset, keep: impl Fn(SemiLabel) -> bool) -> Option<Tensor2> {
    let rows: Vec<&[f64]> = ds
        .samples()
        .iter()
        .filter(|s| keep(s.semi))
        .map(|s| s.features.as_slice())
        .collect();
    if rows.is_empty() {
        None
    } else {
        Some(Tensor2::from_rows(&rows).expect("rows have dataset dim"))
    }
}

fn mean_energy(
    encoder: &EncoderParams,
    prototypes: &Tensor2,
    xs: Option<&Tensor2>,
    shifts: &ShiftFamily,
    tau: f64,
) -> Result<Option<f64>> {
    let Some(xs) = xs else { return Ok(None) };
    let u = embed_all_shifts(encoder, xs, shifts)?;
    let s = crate::objective::Scorer::Energy { prototypes, tau }.score_rows(&u)?;
    Ok(Some(s.iter().sum::<f64>() / s.len() as f64))
}

struct Snapshot {
    epoch: usize,
    earlystop: f64,
    test: Option<f64>,
    encoder: EncoderParams,
    prototypes: PrototypeSet,
    rng_word_pos: u128,
}

/// Fine-tunes `encoder` against `prototypes` and returns the checkpoint with
/// the highest early-stop score (earliest on ties).
pub fn finetune_loop(
    encoder: EncoderParams,
    prototypes: PrototypeSet,
    data: FinetuneData<'_>,
    cfg: &FinetuneConfig,
    mut monitor: Option<&mut Monitor<'_>>,
) -> Result<RunResult> {
    if cfg.batch_size == 0 {
        return Err(ElsaError::invalid("finetune batch_size must be >= 1"));
    }
    let shifts = data.shifts;
    let k_s = shifts.count();
    let with_shift = cfg.shift_loss && k_s >= 2;
    let samples = data.train.samples();
    if samples.is_empty() {
        return Err(ElsaError::invalid("fine-tuning needs a nonempty training set"));
    }
    let validation = features_of(data.validation, |_| true)
        .ok_or_else(|| ElsaError::invalid("early stopping needs a nonempty validation set"))?;
    let cluster_rows = clustering_rows(data.train);
    let labeled_anomalies = features_of(data.train, |s| s == SemiLabel::LabeledAnomaly);
    let labeled_normals = features_of(data.train, |s| s == SemiLabel::LabeledNormal);
    let earlystop_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;

    let mut encoder = encoder;
    let mut protos = prototypes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(encoder.num_params(), cfg.lr);
    let start = Instant::now();

    let record = |epoch: usize,
                  loss: LossBreakdown,
                  refreshed: bool,
                  encoder: &EncoderParams,
                  protos: &PrototypeSet,
                  monitor: &mut Option<&mut Monitor<'_>>|
     -> Result<MetricsRecord> {
        let mut es_rng = ChaCha8Rng::seed_from_u64(earlystop_seed);
        let earlystop_auroc = earlystop_score(
            encoder,
            protos.vectors(),
            &validation,
            shifts,
            data.weak,
            data.strong,
            &mut es_rng,
        )?;
        let test_auroc = match monitor {
            Some(m) => Some(m(encoder, protos)?),
            None => None,
        };
        Ok(MetricsRecord {
            epoch,
            loss,
            earlystop_auroc,
            test_auroc,
            prototype_refresh: refreshed,
            mean_score_labeled_anomaly: mean_energy(
                encoder,
                protos.vectors(),
                labeled_anomalies.as_ref(),
                shifts,
                cfg.tau,
            )?,
            mean_score_labeled_normal: mean_energy(
                encoder,
                protos.vectors(),
                labeled_normals.as_ref(),
                shifts,
                cfg.tau,
            )?,
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    };

    let first = record(0, LossBreakdown::default(), false, &encoder, &protos, &mut monitor)?;
    let mut best = Snapshot {
        epoch: 0,
        earlystop: first.earlystop_auroc,
        test: first.test_auroc,
        encoder: encoder.clone(),
        prototypes: protos.clone(),
        rng_word_pos: rng.get_word_pos(),
    };
    let mut trace = vec![first];
    let mut diverged = None;
    let mut order: Vec<usize> = (0..samples.len()).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].features.as_slice()).collect();
            let (views, shift_ids) = expand_views(&rows, shifts, data.weak, &mut rng)?;
            let semis: Vec<SemiLabel> = (0..2)
                .flat_map(|_| chunk.iter().flat_map(|&i| std::iter::repeat_n(samples[i].semi, k_s)))
                .collect();
            match train_step(
                &mut encoder,
                &mut opt,
                protos.vectors(),
                &views,
                &semis,
                &shift_ids,
                with_shift,
                cfg,
            ) {
                Ok(l) => {
                    sum.total += l.total;
                    sum.anomaly_term += l.anomaly_term;
                    sum.normal_term += l.normal_term;
                    sum.shift_term += l.shift_term;
                    batches += 1;
                }
                Err(e) if e.is_numeric() => {
                    diverged = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let nb = batches.max(1) as f64;
        let mean = LossBreakdown {
            total: sum.total / nb,
            anomaly_term: sum.anomaly_term / nb,
            normal_term: sum.normal_term / nb,
            shift_term: sum.shift_term / nb,
        };
        let refreshed = if cluster_rows.rows() > 0 {
            let points = embed_all_shifts(&encoder, &cluster_rows, shifts)?;
            let (next, fired) = refresh(
                &protos,
                &points,
                epoch,
                cfg.refresh_period,
                cfg.warm_start,
                cfg.seed ^ epoch as u64,
            )?;
            protos = next;
            fired
        } else {
            false
        };
        let rec = record(epoch, mean, refreshed, &encoder, &protos, &mut monitor)?;
        if rec.earlystop_auroc > best.earlystop {
            best = Snapshot {
                epoch,
                earlystop: rec.earlystop_auroc,
                test: rec.test_auroc,
                encoder: encoder.clone(),
                prototypes: protos.clone(),
                rng_word_pos: rng.get_word_pos(),
            };
        }
        trace.push(rec);
    }

    Ok(RunResult {
        best_epoch: best.epoch,
        best_earlystop: best.earlystop,
        best_test_auroc: best.test,
        encoder: best.encoder,
        prototypes: best.prototypes,
        trace,
        diverged,
        rng_word_pos: best.rng_word_pos,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    encoder: &mut EncoderParams,
    opt: &mut Adam,
    prototypes: &Tensor2,
    views: &Tensor2,
    semis: &[SemiLabel],
    shift_ids: &[usize],
    with_shift: bool,
    cfg: &FinetuneConfig,
) -> Result<LossBreakdown> {
    let cache = encoder.forward(views)?;
    let u = &cache.embedding;
    let ts = train_scores(cfg.score, u, prototypes, cfg.tau)?;
    let c = train_score_max(cfg.score, prototypes.rows(), u.rows(), cfg.tau, cfg.c_mode);
    let (mut breakdown, grad_scores) = cfg.loss.evaluate(&ts.scores, semis, c)?;
    let grad_u = train_scores_backward(cfg.score, u, prototypes, cfg.tau, &ts, &grad_scores);

    let grad_logits = if with_shift {
        // Shift prediction covers unlabeled and labeled-normal views only.
        let half = shift_ids.len();
        let keep: Vec<usize> = (0..u.rows()).filter(|&i| !semis[i].is_anomaly()).collect();
        if keep.is_empty() {
            None
        } else {
            let kc = cache.logits.cols();
            let rows: Vec<&[f64]> = keep.iter().map(|&i| cache.logits.row(i)).collect();
            let ids: Vec<usize> = keep.iter().map(|&i| shift_ids[i % half]).collect();
            let (ls, g) = loss_shift(&Tensor2::from_rows(&rows)?, &ids)?;
            breakdown.shift_term = ls;
            breakdown.total += ls;
            let mut full = Tensor2::zeros(u.rows(), kc);
            for (j, &i) in keep.iter().enumerate() {
                full.row_mut(i).copy_from_slice(g.row(j));
            }
            Some(full)
        }
    } else {
        None
    };
    let grad = encoder.backward(&cache, Some(&grad_u), grad_logits.as_ref());
    crate::mathcore::ensure_finite(&grad, "fine-tuning gradient")?;
    opt.step(encoder.as_mut_slice(), &grad);
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;
    use crate::mathcore::l2_normalize;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn setup(k_s: usize) -> (EncoderParams, Tensor2, ShiftFamily, Tensor2) {
        let dims = EncoderDims {
            input: 8,
            hidden: 16,
            embed: 6,
            shifts: k_s,
        };
        let enc = EncoderParams::init(1, dims).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| l2_normalize(&(0..6).map(|_| r.sample(StandardNormal)).collect::<Vec<f64>>()).unwrap())
            .collect();
        let xs = Tensor2::new(10, 8, (0..80).map(|_| r.sample(StandardNormal)).collect()).unwrap();
        (
            enc,
            Tensor2::from_rows(&rows).unwrap(),
            ShiftFamily::new(8, k_s, 3).unwrap(),
            xs,
        )
    }

    fn cfg() -> FinetuneConfig {
        FinetuneConfig {
            epochs: 1,
            batch_size: 10,
            lr: 1e-2,
            tau: 0.5,
            score: ScoreKind::Energy,
            loss: LossKind::Elsa,
            c_mode: CMode::Analytic,
            refresh_period: 1,
            warm_start: true,
            shift_loss: false,
            seed: 0,
        }
    }

    #[test]
    fn steps_move_scores_by_label() {
        let (enc0, protos, shifts, xs) = setup(1);
        for semi in [SemiLabel::LabeledAnomaly, SemiLabel::Unlabeled] {
            let mut enc = enc0.clone();
            let mut opt = Adam::new(enc.num_params(), 1e-2);
            let semis = vec![semi; xs.rows()];
            let ids = vec![0; xs.rows()];
            let before = mean_energy(&enc, &protos, Some(&xs), &shifts, 0.5).unwrap().unwrap();
            for _ in 0..20 {
                train_step(&mut enc, &mut opt, &protos, &xs, &semis, &ids, false, &cfg()).unwrap();
            }
            let after = mean_energy(&enc, &protos, Some(&xs), &shifts, 0.5).unwrap().unwrap();
            if semi.is_anomaly() {
                assert!(after < before, "{before} -> {after}");
            } else {
                assert!(after > before, "{before} -> {after}");
            }
        }
    }
}
