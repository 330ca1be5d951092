//! Subcommand bodies. Each takes an already-resolved configuration and paths,
//! writes its artifacts, and returns the text it wants printed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use elsa_core::augment::ShiftFamily;
use elsa_core::config::RunConfig;
use elsa_core::data::{read_dataset, write_dataset, Dataset, ScenarioSplits};
use elsa_core::evalharness::experiment::{
    ablation_csv, derive_seed, encoder_dims, finetune_from, fit_prototypes, prepare, prepare_splits, pretrain_stage,
    rows_of, run_ablation, run_scenario, score_rows, summary_csv, sweep_gamma_p, test_auroc, Prepared, ScenarioReport,
    STREAM_FINETUNE, STREAM_PRETRAIN, STREAM_TEST,
};
use elsa_core::objective::{LossKind, ScoreKind};
use elsa_core::{ElsaError, Result};

use crate::persist::{load_checkpoint, metrics_jsonl, metrics_line, save_checkpoint, Checkpoint, RngState, Stage};

pub const SPLITS_SCHEMA: u32 = 1;

/// Sidecar written next to generated datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsMeta {
    pub schema: u32,
    pub normal_classes: Vec<u32>,
    pub split_digest: String,
    pub config: RunConfig,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| ElsaError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| ElsaError::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ElsaError::io(path, e))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    fs::create_dir_all(out).map_err(|e| ElsaError::io(out, e))?;
    write_dataset(&out.join("train.ds"), &prep.splits.train)?;
    write_dataset(&out.join("validation.ds"), &prep.splits.validation)?;
    write_dataset(&out.join("test.ds"), &prep.splits.test)?;
    let meta = SplitsMeta {
        schema: SPLITS_SCHEMA,
        normal_classes: prep.splits.normal_classes.clone(),
        split_digest: prep.split_digest.clone(),
        config: cfg.clone(),
    };
    write(&out.join("splits.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(format!(
        "wrote {} (train {}, validation {}, test {}, digest {})\n",
        out.display(),
        prep.splits.train.len(),
        prep.splits.validation.len(),
        prep.splits.test.len(),
        prep.split_digest
    ))
}

/// Loads a directory written by [`gen_data`].
pub fn load_prepared(cfg: &RunConfig, dir: &Path) -> Result<Prepared> {
    let meta: SplitsMeta = serde_json::from_str(&read_to_string(&dir.join("splits.json"))?)?;
    if meta.schema != SPLITS_SCHEMA {
        return Err(ElsaError::VersionMismatch {
            what: "splits metadata",
            found: meta.schema,
            expected: SPLITS_SCHEMA,
        });
    }
    let splits = ScenarioSplits {
        train: read_dataset(&dir.join("train.ds"))?,
        validation: read_dataset(&dir.join("validation.ds"))?,
        test: read_dataset(&dir.join("test.ds"))?,
        normal_classes: meta.normal_classes,
    };
    prepare_splits(cfg, splits)
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path, metrics: Option<&Path>) -> Result<String> {
    cfg.validate()?;
    let prep = load_prepared(cfg, data)?;
    let (encoder, report) = pretrain_stage(cfg, &prep)?;
    let ck = Checkpoint {
        config: cfg.clone(),
        stage: Stage::Pretrain,
        epoch: cfg.pretrain.epochs,
        feature_std: prep.feature_std,
        rng: RngState {
            seed: derive_seed(cfg.seed, STREAM_PRETRAIN),
            word_pos: report.rng_word_pos,
        },
        encoder,
        prototypes: None,
    };
    save_checkpoint(out, &ck)?;
    if let Some(m) = metrics {
        write(m, metrics_jsonl("pretrain_epoch", &report.records))?;
    }
    let mut msg = String::new();
    if let (Some(first), Some(last)) = (report.records.first(), report.records.last()) {
        writeln!(
            msg,
            "pretrain: {} epochs, probe loss {:.4} -> {:.4}, uniformity energy {:.4} -> {:.4}",
            last.epoch, first.probe_loss, last.probe_loss, first.uniformity_energy, last.uniformity_energy
        )
        .unwrap();
    }
    writeln!(msg, "wrote {}", out.display()).unwrap();
    Ok(msg)
}

pub fn finetune(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path, metrics: Option<&Path>) -> Result<String> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    let prep = load_prepared(cfg, data)?;
    let want = encoder_dims(cfg, prep.splits.train.dim());
    if ck.encoder.dims() != want {
        return Err(ElsaError::Validation(vec![format!(
            "checkpoint encoder dims {:?} conflict with configured dims {:?}",
            ck.encoder.dims(),
            want
        )]));
    }
    let protos = match ck.prototypes {
        Some(p) if p.k() != cfg.prototypes.count => {
            return Err(ElsaError::Validation(vec![format!(
                "checkpoint holds {} prototypes but prototypes.count is {}",
                p.k(),
                cfg.prototypes.count
            )]))
        }
        Some(p) => p,
        None => fit_prototypes(cfg, &prep, &ck.encoder, cfg.prototypes.count)?,
    };
    let outcome = finetune_from(cfg, &prep, &ck.encoder, protos)?;
    let run = &outcome.run;
    let next = Checkpoint {
        config: cfg.clone(),
        stage: Stage::Finetune,
        epoch: run.best_epoch,
        feature_std: prep.feature_std,
        rng: RngState {
            seed: derive_seed(cfg.seed, STREAM_FINETUNE),
            word_pos: run.rng_word_pos,
        },
        encoder: run.encoder.clone(),
        prototypes: Some(run.prototypes.clone()),
    };
    save_checkpoint(out, &next)?;
    if let Some(m) = metrics {
        write(m, metrics_jsonl("finetune_epoch", &run.trace))?;
    }
    let mut msg = String::new();
    if let Some(d) = &run.diverged {
        writeln!(msg, "warning: training stopped early ({d})").unwrap();
    }
    writeln!(
        msg,
        "finetune: best epoch {} (earlystop {:.4}), test auroc {:.4}",
        run.best_epoch, run.best_earlystop, outcome.test_auroc
    )
    .unwrap();
    writeln!(msg, "wrote {}", out.display()).unwrap();
    Ok(msg)
}

/// One `id score` line per sample of `input`, in id order.
pub fn score(checkpoint: &Path, input: &Path, reference: Option<&Path>, kind: Option<ScoreKind>) -> Result<String> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = &ck.config;
    let kind = kind.unwrap_or(cfg.finetune.score);
    let ds = read_dataset(input)?;
    let dims = ck.encoder.dims();
    if ds.dim() != dims.input {
        return Err(ElsaError::DimensionMismatch {
            expected: dims.input,
            got: ds.dim(),
        });
    }
    let train = match reference {
        Some(p) => read_dataset(p)?,
        None if kind == ScoreKind::Uniformity => {
            return Err(ElsaError::invalid("uniformity scoring needs --reference <train.ds>"))
        }
        None => Dataset::new(ds.dim(), Vec::new(), Vec::new())?,
    };
    let shifts = ShiftFamily::new(dims.input, dims.shifts, cfg.model.shift_seed)?;
    let weak = cfg.augment.weak.scaled_by(ck.feature_std);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| ds.samples()[i].id);
    let scores = score_rows(
        cfg,
        kind,
        &ck.encoder,
        ck.prototypes.as_ref(),
        &train,
        &shifts,
        &weak,
        &rows_of(&ds)?,
        derive_seed(cfg.seed, STREAM_TEST),
    )?;
    let mut out = String::new();
    for i in order {
        writeln!(out, "{} {}", ds.samples()[i].id, scores[i]).unwrap();
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    checkpoint: &'a str,
    stage: Stage,
    score: ScoreKind,
    test_auroc: f64,
    baseline_auroc: f64,
    config: &'a RunConfig,
}

pub fn eval(data: &Path, checkpoint: &Path, out: Option<&Path>) -> Result<String> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = &ck.config;
    let prep = load_prepared(cfg, data)?;
    let kind = if ck.prototypes.is_some() {
        cfg.finetune.score
    } else {
        ScoreKind::Uniformity
    };
    let (auc, _) = test_auroc(cfg, &prep, kind, &ck.encoder, ck.prototypes.as_ref())?;
    let (base, _) = test_auroc(cfg, &prep, ScoreKind::Uniformity, &ck.encoder, None)?;
    if let Some(o) = out {
        let report = EvalReport {
            checkpoint: &checkpoint.display().to_string(),
            stage: ck.stage,
            score: kind,
            test_auroc: auc,
            baseline_auroc: base,
            config: cfg,
        };
        write(o, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(format!(
        "test auroc ({kind}) {auc:.4}\nuniformity baseline auroc {base:.4}\n"
    ))
}

pub struct ScenarioArgs {
    pub grid: bool,
    pub gamma_p: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

fn write_report(out: &Path, report: &ScenarioReport) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| ElsaError::io(out, e))?;
    write(&out.join("runs.jsonl"), metrics_jsonl("scenario_run", &report.rows))?;
    write(&out.join("summary.csv"), summary_csv(&report.summary))?;
    write(&out.join("report.json"), serde_json::to_string_pretty(report)? + "\n")
}

pub fn scenario(cfg: &RunConfig, args: &ScenarioArgs) -> Result<String> {
    cfg.validate()?;
    let mut log = String::new();
    let mut on_run = |row: &elsa_core::evalharness::experiment::ScenarioRow, _: &_| {
        eprintln!("{}", metrics_line("scenario_run", row));
    };
    let report = if args.gamma_p.is_empty() {
        run_scenario(cfg, args.grid, &mut on_run)?
    } else {
        let seeds = if args.seeds.is_empty() {
            vec![cfg.seed]
        } else {
            args.seeds.clone()
        };
        sweep_gamma_p(cfg, &args.gamma_p, &seeds, &mut on_run)?
    };
    if let Some(out) = &args.out {
        write_report(out, &report)?;
    }
    for s in &report.summary {
        writeln!(
            log,
            "{}: runs {}, auroc {:.4} ± {:.4} (baseline {:.4})",
            s.group, s.runs, s.mean_auroc, s.stderr_auroc, s.mean_baseline_auroc
        )
        .unwrap();
    }
    if let [row] = report.rows.as_slice() {
        writeln!(log, "final test auroc {:.4}", row.test_auroc).unwrap();
    }
    Ok(log)
}

/// Parses `score/loss` pairs such as `energy/elsa`.
pub fn parse_pairs(spec: &str) -> Result<Vec<(ScoreKind, LossKind)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|p| {
            let (s, l) = p
                .trim()
                .split_once('/')
                .ok_or_else(|| ElsaError::invalid(format!("ablation pair '{p}' is not score/loss")))?;
            Ok((s.parse()?, l.parse()?))
        })
        .collect()
}

pub fn all_pairs() -> Vec<(ScoreKind, LossKind)> {
    let mut v = Vec::new();
    for s in [ScoreKind::Energy, ScoreKind::Cosine, ScoreKind::Uniformity] {
        for l in [LossKind::Elsa, LossKind::Naive, LossKind::Deepsad] {
            v.push((s, l));
        }
    }
    v
}

pub fn ablation(cfg: &RunConfig, pairs: &[(ScoreKind, LossKind)], out: Option<&Path>) -> Result<String> {
    let report = run_ablation(cfg, pairs)?;
    let csv = ablation_csv(&report);
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| ElsaError::io(o, e))?;
        write(&o.join("ablation.csv"), &csv)?;
        write(&o.join("ablation.jsonl"), metrics_jsonl("ablation_row", &report.rows))?;
    }
    Ok(csv)
}
