//! Recorded-metric trends of one full run on the synthetic default.

use elsa_core::config::RunConfig;
use elsa_core::evalharness::experiment::{finetune_stage, prepare, pretrain_stage};
use elsa_core::mathcore::Tensor2;
use elsa_core::pretrain::shift_accuracy;

#[test]
fn pretraining_and_finetuning_move_the_recorded_metrics() {
    let cfg = RunConfig::default();
    let prep = prepare(&cfg).unwrap();
    let (pretrained, report) = pretrain_stage(&cfg, &prep).unwrap();
    let recs = &report.records;
    assert_eq!(recs.len(), cfg.pretrain.epochs + 1);

    let (first, last) = (&recs[0], recs.last().unwrap());
    assert!(
        last.probe_loss < first.probe_loss,
        "{} -> {}",
        first.probe_loss,
        last.probe_loss
    );
    // Contrastive training raises the training samples' contrastive energy.
    assert!(last.uniformity_energy > first.uniformity_energy);

    // The shift head generalizes to held-out normals.
    let test = &prep.splits.test;
    let normal = test.ground_truth().normality(&prep.splits.normal_classes);
    let rows: Vec<&[f64]> = test
        .samples()
        .iter()
        .zip(&normal)
        .filter(|(_, &n)| n)
        .map(|(s, _)| s.features.as_slice())
        .collect();
    let acc = shift_accuracy(&pretrained, &Tensor2::from_rows(&rows).unwrap(), &prep.shifts).unwrap();
    assert!(
        acc > 1.0 / prep.shifts.count() as f64 + 0.2,
        "held-out shift accuracy {acc}"
    );

    let out = finetune_stage(&cfg, &prep, &pretrained, cfg.prototypes.count).unwrap();
    assert!(out.run.diverged.is_none());
    let trace = &out.run.trace;
    let best = &trace[out.run.best_epoch];
    let start = &trace[0];
    let (a0, a1) = (
        start.mean_score_labeled_anomaly.unwrap(),
        best.mean_score_labeled_anomaly.unwrap(),
    );
    let (n0, n1) = (
        start.mean_score_labeled_normal.unwrap(),
        best.mean_score_labeled_normal.unwrap(),
    );
    assert!(out.run.best_epoch > 0);
    assert!(a1 < a0, "labeled anomalies {a0} -> {a1}");
    assert!(n1 > n0, "labeled normals {n0} -> {n1}");
}

// Red on the default: the probe loss plateaus within ~20 epochs and then
// rises in ~45% of the remaining epochs by a few 1e-3.
#[test]
#[ignore = "unattained: probe loss plateaus early and jitters in ~45% of epochs"]
fn probe_loss_rises_in_at_most_a_fifth_of_epochs() {
    let cfg = RunConfig::default();
    let prep = prepare(&cfg).unwrap();
    let (_, report) = pretrain_stage(&cfg, &prep).unwrap();
    let recs = &report.records;
    let rises = recs.windows(2).filter(|w| w[1].probe_loss > w[0].probe_loss).count();
    assert!(
        rises * 5 < recs.len(),
        "{rises} of {} epochs raised the probe loss",
        recs.len() - 1
    );
}
