//! End-to-end drivers: one pipeline run, scenario grids and sweeps, the
//! score × loss ablation matrix and the prototype-count sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::finetune::{clustering_rows, embed_all_shifts, finetune_loop, FinetuneConfig, FinetuneData, RunResult};
use super::metrics::{auroc, mean_stderr};
use crate::augment::{ShiftFamily, StrongAugConfig, WeakAugConfig};
use crate::config::{Mode, RunConfig};
use crate::data::{build_scenario, generate, Dataset, Scenario, ScenarioPools, ScenarioSplits, SyntheticSpec};
use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{ElsaError, Result};
use crate::mathcore::Tensor2;
use crate::objective::{ensemble_scores, LossKind, ScoreKind, Scorer};
use crate::pretrain::{pretrain_loop, PretrainConfig, PretrainRecord, PretrainReport};
use crate::prototypes::{fit, PrototypeSet};

/// Distance (in units of `cluster_spread`) between the primary pool's center
/// and the auxiliary / outlier pools' centers under S3.
pub const S3_CENTER_SHIFT: f64 = 3.0;

/// Independent stream seed derived from a run seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const STREAM_INIT: u64 = 1;
pub const STREAM_PRETRAIN: u64 = 2;
pub const STREAM_PROTOTYPES: u64 = 3;
pub const STREAM_FINETUNE: u64 = 4;
pub const STREAM_TEST: u64 = 5;
pub const STREAM_AUX: u64 = 6;
pub const STREAM_OUTLIER: u64 = 7;

/// Generates the pools the configured scenario needs.
pub fn scenario_pools(cfg: &RunConfig) -> Result<ScenarioPools> {
    let primary = generate(&cfg.data)?.pool;
    if cfg.scenario.scenario != Scenario::S3 {
        return Ok(ScenarioPools::primary_only(primary));
    }
    let shifted = |stream| SyntheticSpec {
        center_shift: S3_CENTER_SHIFT * cfg.data.cluster_spread,
        seed: derive_seed(cfg.data.seed, stream),
        ..cfg.data.clone()
    };
    Ok(ScenarioPools {
        primary,
        auxiliary: Some(generate(&shifted(STREAM_AUX))?.pool),
        outliers: Some(generate(&shifted(STREAM_OUTLIER))?.pool),
    })
}

/// Standard deviation over every feature entry of `ds`.
pub fn feature_std(ds: &Dataset) -> f64 {
    let vals: Vec<f64> = ds.samples().iter().flat_map(|s| s.features.iter().copied()).collect();
    if vals.len() < 2 {
        return 1.0;
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    if var > 0.0 {
        var.sqrt()
    } else {
        1.0
    }
}

/// Splits plus the data-dependent objects every stage shares.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: ScenarioSplits,
    pub shifts: ShiftFamily,
    pub feature_std: f64,
    pub weak: WeakAugConfig,
    pub strong: StrongAugConfig,
    /// Hash over the train, validation and test digests.
    pub split_digest: String,
}

pub fn split_digest(splits: &ScenarioSplits) -> String {
    let mut h = Sha256::new();
    for ds in [&splits.train, &splits.validation, &splits.test] {
        h.update(ds.digest().as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn prepare_splits(cfg: &RunConfig, splits: ScenarioSplits) -> Result<Prepared> {
    let std = feature_std(&splits.train);
    let shifts = ShiftFamily::new(splits.train.dim(), cfg.effective_shifts(), cfg.model.shift_seed)?;
    Ok(Prepared {
        split_digest: split_digest(&splits),
        weak: cfg.augment.weak.scaled_by(std),
        strong: cfg.augment.strong.scaled_by(std),
        feature_std: std,
        shifts,
        splits,
    })
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let pools = scenario_pools(cfg)?;
    prepare_splits(cfg, build_scenario(&pools, &cfg.scenario)?)
}

pub fn encoder_dims(cfg: &RunConfig, input: usize) -> EncoderDims {
    EncoderDims {
        input,
        hidden: cfg.model.hidden,
        embed: cfg.model.embed,
        shifts: cfg.effective_shifts(),
    }
}

pub fn pretrain_config(cfg: &RunConfig) -> PretrainConfig {
    PretrainConfig {
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        lr: cfg.pretrain.lr,
        lr_schedule: cfg.pretrain.lr_schedule,
        momentum: cfg.pretrain.momentum,
        tau: cfg.pretrain_tau(),
        shift_loss: cfg.mode == Mode::ElsaPlus,
        probe_size: cfg.pretrain.probe_size,
        seed: derive_seed(cfg.seed, STREAM_PRETRAIN),
    }
}

pub fn finetune_config(cfg: &RunConfig) -> FinetuneConfig {
    FinetuneConfig {
        epochs: cfg.finetune.epochs,
        batch_size: cfg.finetune.batch_size,
        lr: cfg.finetune.lr,
        tau: cfg.score_tau(),
        score: cfg.finetune.score,
        loss: cfg.finetune.loss,
        c_mode: cfg.finetune.c_mode,
        refresh_period: cfg.refresh_period(),
        warm_start: cfg.prototypes.warm_start,
        shift_loss: cfg.mode == Mode::ElsaPlus,
        seed: derive_seed(cfg.seed, STREAM_FINETUNE),
    }
}

/// Initializes and pre-trains an encoder.
pub fn pretrain_stage(cfg: &RunConfig, prep: &Prepared) -> Result<(EncoderParams, PretrainReport)> {
    let mut enc = EncoderParams::init(
        derive_seed(cfg.seed, STREAM_INIT),
        encoder_dims(cfg, prep.splits.train.dim()),
    )?;
    let report = pretrain_loop(
        &mut enc,
        &prep.splits.train,
        &prep.shifts,
        &prep.weak,
        &pretrain_config(cfg),
    )?;
    Ok((enc, report))
}

/// Prototypes fitted to the clustering pool's embeddings over all shifts.
pub fn fit_prototypes(cfg: &RunConfig, prep: &Prepared, encoder: &EncoderParams, k: usize) -> Result<PrototypeSet> {
    let points = embed_all_shifts(encoder, &clustering_rows(&prep.splits.train), &prep.shifts)?;
    fit(&points, k, derive_seed(cfg.seed, STREAM_PROTOTYPES))
}

/// Feature rows of `ds` in sample order.
pub fn rows_of(ds: &Dataset) -> Result<Tensor2> {
    let rows: Vec<&[f64]> = ds.samples().iter().map(|s| s.features.as_slice()).collect();
    if rows.is_empty() {
        return Ok(Tensor2::zeros(0, ds.dim()));
    }
    Tensor2::from_rows(&rows)
}

/// Ensembled test-time scores of every row of `xs` (one per sample, in order).
#[allow(clippy::too_many_arguments)]
pub fn score_rows(
    cfg: &RunConfig,
    kind: ScoreKind,
    encoder: &EncoderParams,
    prototypes: Option<&PrototypeSet>,
    train: &Dataset,
    shifts: &ShiftFamily,
    weak: &WeakAugConfig,
    xs: &Tensor2,
    seed: u64,
) -> Result<Vec<f64>> {
    let reference;
    let need_protos = || prototypes.ok_or_else(|| ElsaError::invalid(format!("{kind} scoring needs prototypes")));
    let scorer = match kind {
        ScoreKind::Energy => Scorer::Energy {
            prototypes: need_protos()?.vectors(),
            tau: cfg.score_tau(),
        },
        ScoreKind::Cosine => Scorer::Cosine {
            prototypes: need_protos()?.vectors(),
        },
        ScoreKind::Uniformity => {
            reference = embed_all_shifts(encoder, &clustering_rows(train), shifts)?;
            Scorer::Uniformity { reference: &reference }
        }
    };
    let mode = if kind == ScoreKind::Energy {
        cfg.ensemble.mode
    } else {
        Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ensemble_scores(
        xs,
        encoder,
        shifts,
        weak,
        scorer,
        cfg.ensemble.n_samples,
        mode,
        &mut rng,
    )
}

/// Test AUROC of an ensembled score with the split's normal classes as the
/// positive class.
pub fn test_auroc(
    cfg: &RunConfig,
    prep: &Prepared,
    kind: ScoreKind,
    encoder: &EncoderParams,
    prototypes: Option<&PrototypeSet>,
) -> Result<(f64, Vec<f64>)> {
    let test = &prep.splits.test;
    let scores = score_rows(
        cfg,
        kind,
        encoder,
        prototypes,
        &prep.splits.train,
        &prep.shifts,
        &prep.weak,
        &rows_of(test)?,
        derive_seed(cfg.seed, STREAM_TEST),
    )?;
    let labels = test.ground_truth().normality(&prep.splits.normal_classes);
    Ok((auroc(&scores, &labels)?, scores))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub run: RunResult,
    pub test_auroc: f64,
    pub test_scores: Vec<f64>,
}

/// Fits `k` prototypes on the pre-trained encoder, fine-tunes, and scores the
/// test split with the selected checkpoint. No prototype-count guard is
/// applied here; configuration validation is the caller's business.
pub fn finetune_stage(
    cfg: &RunConfig,
    prep: &Prepared,
    pretrained: &EncoderParams,
    k: usize,
) -> Result<FinetuneOutcome> {
    let protos = fit_prototypes(cfg, prep, pretrained, k)?;
    finetune_from(cfg, prep, pretrained, protos)
}

/// Fine-tunes from given prototypes and scores the test split with the
/// selected checkpoint.
pub fn finetune_from(
    cfg: &RunConfig,
    prep: &Prepared,
    pretrained: &EncoderParams,
    protos: PrototypeSet,
) -> Result<FinetuneOutcome> {
    let fcfg = finetune_config(cfg);
    let test_rows = rows_of(&prep.splits.test)?;
    let labels = prep.splits.test.ground_truth().normality(&prep.splits.normal_classes);
    let train = &prep.splits.train;
    let shifts = &prep.shifts;
    let mut monitor = |enc: &EncoderParams, p: &PrototypeSet| -> Result<f64> {
        // Cheap observation score: mean over shifts, no weak augmentation.
        let u = embed_all_shifts(enc, &test_rows, shifts)?;
        let reference;
        let scorer = match fcfg.score {
            ScoreKind::Energy => Scorer::Energy {
                prototypes: p.vectors(),
                tau: fcfg.tau,
            },
            ScoreKind::Cosine => Scorer::Cosine {
                prototypes: p.vectors(),
            },
            ScoreKind::Uniformity => {
                reference = embed_all_shifts(enc, &clustering_rows(train), shifts)?;
                Scorer::Uniformity { reference: &reference }
            }
        };
        let s = scorer.score_rows(&u)?;
        let n = test_rows.rows();
        let mean: Vec<f64> = (0..n)
            .map(|i| (0..shifts.count()).map(|k| s[k * n + i]).sum::<f64>() / shifts.count() as f64)
            .collect();
        auroc(&mean, &labels)
    };
    let data = FinetuneData {
        train,
        validation: &prep.splits.validation,
        shifts,
        weak: &prep.weak,
        strong: &prep.strong,
    };
    let monitor_ref: Option<&mut super::finetune::Monitor<'_>> = if cfg.finetune.monitor_test && test_rows.rows() > 0 {
        Some(&mut monitor)
    } else {
        None
    };
    let run = finetune_loop(pretrained.clone(), protos, data, &fcfg, monitor_ref)?;
    let (test_auroc, test_scores) = test_auroc(cfg, prep, fcfg.score, &run.encoder, Some(&run.prototypes))?;
    Ok(FinetuneOutcome {
        run,
        test_auroc,
        test_scores,
    })
}

/// Everything one full pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub split_digest: String,
    pub pretrain: Vec<PretrainRecord>,
    pub pretrain_used_ids: Vec<u64>,
    /// Test AUROC of the uniformity energy on the pre-trained encoder.
    pub baseline_auroc: f64,
    pub finetune: FinetuneOutcome,
    pub feature_std: f64,
    pub pretrained: EncoderParams,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineResult> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    run_prepared(cfg, &prep)
}

pub fn run_prepared(cfg: &RunConfig, prep: &Prepared) -> Result<PipelineResult> {
    let (pretrained, report) = pretrain_stage(cfg, prep)?;
    let (baseline_auroc, _) = test_auroc(cfg, prep, ScoreKind::Uniformity, &pretrained, None)?;
    let finetune = finetune_stage(cfg, prep, &pretrained, cfg.prototypes.count)?;
    Ok(PipelineResult {
        split_digest: prep.split_digest.clone(),
        pretrain: report.records,
        pretrain_used_ids: report.used_ids,
        baseline_auroc,
        finetune,
        feature_std: prep.feature_std,
        pretrained,
    })
}

// ---------------------------------------------------------------------------
// Reports

/// One pipeline run in a scenario report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: Scenario,
    pub mode: Mode,
    pub normal_config: usize,
    pub anomaly_mix: String,
    pub gamma_l: f64,
    pub gamma_p: f64,
    pub seed: u64,
    pub test_auroc: f64,
    pub baseline_auroc: f64,
    pub best_epoch: usize,
    pub best_earlystop: f64,
    pub diverged: bool,
    pub split_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub runs: usize,
    pub mean_auroc: f64,
    pub stderr_auroc: f64,
    pub mean_baseline_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub config: RunConfig,
    pub rows: Vec<ScenarioRow>,
    pub summary: Vec<SummaryRow>,
}

fn summarize<T>(
    rows: &[T],
    group: impl Fn(&T) -> String,
    auroc: impl Fn(&T) -> f64,
    base: impl Fn(&T) -> f64,
) -> Vec<SummaryRow> {
    let mut groups: Vec<String> = Vec::new();
    for r in rows {
        let g = group(r);
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let members: Vec<&T> = rows.iter().filter(|r| group(r) == g).collect();
            let a: Vec<f64> = members.iter().map(|r| auroc(r)).collect();
            let b: Vec<f64> = members.iter().map(|r| base(r)).collect();
            let (mean_auroc, stderr_auroc) = mean_stderr(&a);
            SummaryRow {
                group: g,
                runs: members.len(),
                mean_auroc,
                stderr_auroc,
                mean_baseline_auroc: mean_stderr(&b).0,
            }
        })
        .collect()
}

fn mix_label(classes: &Option<Vec<u32>>) -> String {
    match classes {
        None => "all".to_string(),
        Some(c) => c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("+"),
    }
}

fn scenario_row(cfg: &RunConfig, normal_config: usize, result: &PipelineResult) -> ScenarioRow {
    ScenarioRow {
        scenario: cfg.scenario.scenario,
        mode: cfg.mode,
        normal_config,
        anomaly_mix: mix_label(&cfg.scenario.labeled_anomaly_classes),
        gamma_l: cfg.scenario.gamma_l,
        gamma_p: cfg.scenario.gamma_p,
        seed: cfg.seed,
        test_auroc: result.finetune.test_auroc,
        baseline_auroc: result.baseline_auroc,
        best_epoch: result.finetune.run.best_epoch,
        best_earlystop: result.finetune.run.best_earlystop,
        diverged: result.finetune.run.diverged.is_some(),
        split_digest: result.split_digest.clone(),
    }
}

/// Grid layout at desk scale: four normal configurations (independent draws
/// of the synthetic normal distribution) × three labeled-anomaly mixes.
pub const GRID_NORMAL_CONFIGS: usize = 4;

pub fn grid_anomaly_mixes(anomaly_classes: usize) -> Vec<Vec<u32>> {
    let ids: Vec<u32> = (1..=anomaly_classes as u32).collect();
    let per = ids.len().div_ceil(3).max(1);
    ids.chunks(per).map(|c| c.to_vec()).take(3).collect()
}

/// Runs the configured scenario once, or the full grid with `grid = true`.
/// Every `(row, epoch)` metrics record is passed to `on_epoch`.
pub fn run_scenario(
    cfg: &RunConfig,
    grid: bool,
    on_run: &mut dyn FnMut(&ScenarioRow, &PipelineResult),
) -> Result<ScenarioReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let cells: Vec<(usize, RunConfig)> = if grid {
        let mut cells = Vec::new();
        for n in 0..GRID_NORMAL_CONFIGS {
            for mix in grid_anomaly_mixes(cfg.data.anomaly_class_count) {
                let mut c = cfg.clone();
                c.data.seed = derive_seed(cfg.data.seed, 100 + n as u64);
                if c.scenario.scenario != Scenario::S3 {
                    c.scenario.labeled_anomaly_classes = Some(mix);
                }
                cells.push((n, c));
            }
        }
        cells
    } else {
        vec![(0, cfg.clone())]
    };
    for (n, c) in cells {
        let result = run_pipeline(&c)?;
        let row = scenario_row(&c, n, &result);
        on_run(&row, &result);
        rows.push(row);
    }
    let summary = summarize(
        &rows,
        |r| format!("{}/{}", r.scenario, r.mode),
        |r| r.test_auroc,
        |r| r.baseline_auroc,
    );
    Ok(ScenarioReport {
        config: cfg.clone(),
        rows,
        summary,
    })
}

/// Pollution sweep: one row per `(gamma_p, seed)`, summarized per `gamma_p`.
pub fn sweep_gamma_p(
    cfg: &RunConfig,
    gamma_ps: &[f64],
    seeds: &[u64],
    on_run: &mut dyn FnMut(&ScenarioRow, &PipelineResult),
) -> Result<ScenarioReport> {
    let mut rows = Vec::new();
    for &gp in gamma_ps {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.scenario.gamma_p = gp;
            c.set_all_seeds(seed);
            let result = run_pipeline(&c)?;
            let row = scenario_row(&c, 0, &result);
            on_run(&row, &result);
            rows.push(row);
        }
    }
    let summary = summarize(
        &rows,
        |r| format!("gamma_p={}", r.gamma_p),
        |r| r.test_auroc,
        |r| r.baseline_auroc,
    );
    Ok(ScenarioReport {
        config: cfg.clone(),
        rows,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub score: ScoreKind,
    pub loss: LossKind,
    pub test_auroc: f64,
    pub best_epoch: usize,
    pub diverged: bool,
    pub split_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: RunConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn auroc_of(&self, score: ScoreKind, loss: LossKind) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.score == score && r.loss == loss)
            .map(|r| r.test_auroc)
    }
}

/// Every `(score, loss)` pair fine-tuned from one shared pre-trained encoder
/// on identical splits.
pub fn run_ablation(cfg: &RunConfig, pairs: &[(ScoreKind, LossKind)]) -> Result<AblationReport> {
    let mut problems = Vec::new();
    for &(score, loss) in pairs {
        let mut c = cfg.clone();
        c.finetune.score = score;
        c.finetune.loss = loss;
        problems.extend(c.violations().into_iter().map(|v| format!("{score}/{loss}: {v}")));
    }
    if !problems.is_empty() {
        return Err(ElsaError::Validation(problems));
    }
    let prep = prepare(cfg)?;
    let (pretrained, _) = pretrain_stage(cfg, &prep)?;
    let mut rows = Vec::new();
    for &(score, loss) in pairs {
        let mut c = cfg.clone();
        c.finetune.score = score;
        c.finetune.loss = loss;
        let out = finetune_stage(&c, &prep, &pretrained, c.prototypes.count)?;
        rows.push(AblationRow {
            score,
            loss,
            test_auroc: out.test_auroc,
            best_epoch: out.run.best_epoch,
            diverged: out.run.diverged.is_some(),
            split_digest: prep.split_digest.clone(),
        });
    }
    Ok(AblationReport {
        config: cfg.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSweepRow {
    pub k: usize,
    pub seed: u64,
    pub test_auroc: f64,
    pub best_epoch: usize,
    pub diverged: Option<String>,
    pub earlystop_trace: Vec<f64>,
}

/// Test AUROC per `(k, seed)`. Pre-training is shared across `k` for a seed.
/// Counts with `ln k <= 1/τ` are run deliberately: their scores can leave the
/// loss domain, which the fine-tuning loop reports as divergence.
pub fn sweep_prototype_count(cfg: &RunConfig, ks: &[usize], seeds: &[u64]) -> Result<Vec<PrototypeSweepRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.set_all_seeds(seed);
        let prep = prepare(&c)?;
        let (pretrained, _) = pretrain_stage(&c, &prep)?;
        for &k in ks {
            let mut ck = c.clone();
            ck.prototypes.count = k;
            let out = finetune_stage(&ck, &prep, &pretrained, k)?;
            rows.push(PrototypeSweepRow {
                k,
                seed,
                test_auroc: out.test_auroc,
                best_epoch: out.run.best_epoch,
                diverged: out.run.diverged.clone(),
                earlystop_trace: out.run.trace.iter().map(|r| r.earlystop_auroc).collect(),
            });
        }
    }
    Ok(rows)
}

/// Rows as JSON lines.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    out
}

/// Summary as CSV: `group,runs,mean_auroc,stderr_auroc,mean_baseline_auroc`.
pub fn summary_csv(summary: &[SummaryRow]) -> String {
    let mut out = String::from("group,runs,mean_auroc,stderr_auroc,mean_baseline_auroc\n");
    for s in summary {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            s.group, s.runs, s.mean_auroc, s.stderr_auroc, s.mean_baseline_auroc
        ));
    }
    out
}

/// Ablation matrix as CSV: `score,loss,test_auroc`.
pub fn ablation_csv(report: &AblationReport) -> String {
    let mut out = String::from("score,loss,test_auroc\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{:.6}\n", r.score, r.loss, r.test_auroc));
    }
    out
}
