use std::path::Path;
use std::process::{Command, Output};

use elsa_cli::persist::{decode_checkpoint, encode_checkpoint, load_checkpoint};

fn elsa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elsa"))
        .current_dir(dir)
        .env_remove("ELSA_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = elsa(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    ok(
        t.path(),
        &["gen-data", "--preset", "smoke", "--seed", "7", "--out", "a"],
    );
    ok(
        t.path(),
        &["gen-data", "--preset", "smoke", "--seed", "7", "--out", "b"],
    );
    for f in ["train.ds", "validation.ds", "test.ds", "splits.json"] {
        let a = std::fs::read(t.path().join("a").join(f)).unwrap();
        let b = std::fs::read(t.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn seed_env_var_is_the_default_seed() {
    let t = tempfile::tempdir().unwrap();
    ok(
        t.path(),
        &["gen-data", "--preset", "smoke", "--seed", "9", "--out", "flag"],
    );
    let out = Command::new(env!("CARGO_BIN_EXE_elsa"))
        .current_dir(t.path())
        .env("ELSA_SEED", "9")
        .args(["gen-data", "--preset", "smoke", "--out", "env"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let a = std::fs::read(t.path().join("flag/train.ds")).unwrap();
    let b = std::fs::read(t.path().join("env/train.ds")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn usage_validation_and_io_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let missing_out = elsa(t.path(), &["gen-data", "--preset", "smoke"]);
    assert_eq!(code(&missing_out), 2);

    let polluted_s1 = elsa(
        t.path(),
        &[
            "gen-data",
            "--preset",
            "smoke",
            "--scenario",
            "s1",
            "--gamma-p",
            "0.1",
            "--out",
            "x",
        ],
    );
    assert_eq!(code(&polluted_s1), 3);
    assert!(String::from_utf8_lossy(&polluted_s1.stderr).contains("s1 forbids pollution"));

    // Every violated constraint is listed, not just the first.
    let many = elsa(
        t.path(),
        &[
            "gen-data",
            "--set",
            "tau=-1",
            "--set",
            "ensemble.n_samples=0",
            "--out",
            "x",
        ],
    );
    assert_eq!(code(&many), 3);
    let err = String::from_utf8_lossy(&many.stderr);
    assert!(
        err.contains("tau must be > 0") && err.contains("ensemble.n_samples"),
        "{err}"
    );

    let no_ckpt = elsa(t.path(), &["score", "--checkpoint", "nope.ckpt", "--input", "nope.ds"]);
    assert_eq!(code(&no_ckpt), 4);

    let unknown_key = elsa(t.path(), &["gen-data", "--set", "no.such=1", "--out", "x"]);
    assert_eq!(code(&unknown_key), 3);
}

#[test]
fn staged_pipeline_through_checkpoints() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let common = ["--preset", "smoke", "--seed", "3"];
    let with = |extra: &[&str]| -> Vec<String> { extra.iter().chain(common.iter()).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());

    run(with(&["gen-data", "--out", "data"]));
    run(with(&[
        "pretrain",
        "--data",
        "data",
        "--out",
        "p.ckpt",
        "--metrics",
        "p.jsonl",
    ]));
    let msg = run(with(&[
        "finetune",
        "--data",
        "data",
        "--checkpoint",
        "p.ckpt",
        "--out",
        "f.ckpt",
        "--metrics",
        "f.jsonl",
    ]));
    assert!(msg.contains("test auroc"), "{msg}");

    for (file, kind) in [("p.jsonl", "pretrain_epoch"), ("f.jsonl", "finetune_epoch")] {
        let text = std::fs::read_to_string(d.join(file)).unwrap();
        assert!(text.lines().count() >= 3);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["schema"], 1);
            assert_eq!(v["kind"], kind);
        }
    }

    // Checkpoints on disk re-encode to the same bytes.
    for f in ["p.ckpt", "f.ckpt"] {
        let bytes = std::fs::read(d.join(f)).unwrap();
        assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()), bytes);
    }
    let ck = load_checkpoint(&d.join("f.ckpt")).unwrap();
    assert_eq!(ck.prototypes.as_ref().unwrap().k(), 12);

    // One line per test sample, ids ascending.
    let scores = ok(d, &["score", "--checkpoint", "f.ckpt", "--input", "data/test.ds"]);
    let ids: Vec<u64> = scores
        .lines()
        .map(|l| {
            let (id, s) = l.split_once(' ').unwrap();
            assert!(s.parse::<f64>().unwrap().is_finite());
            id.parse().unwrap()
        })
        .collect();
    let n = elsa_core::data::read_dataset(&d.join("data/test.ds")).unwrap().len();
    assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
    assert_eq!(
        scores,
        ok(d, &["score", "--checkpoint", "f.ckpt", "--input", "data/test.ds"])
    );

    let eval = ok(
        d,
        &["eval", "--data", "data", "--checkpoint", "f.ckpt", "--out", "eval.json"],
    );
    assert!(eval.starts_with("test auroc (energy)"), "{eval}");

    // A prototype count that disagrees with the checkpoint names both values.
    let conflict = elsa(
        d,
        &with(&[
            "finetune",
            "--data",
            "data",
            "--checkpoint",
            "f.ckpt",
            "--out",
            "g.ckpt",
            "--prototypes",
            "20",
        ])
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>(),
    );
    assert_eq!(code(&conflict), 3);
    let err = String::from_utf8_lossy(&conflict.stderr);
    assert!(err.contains("12") && err.contains("20"), "{err}");

    // Uniformity scoring needs the reference set.
    let no_ref = elsa(
        d,
        &[
            "score",
            "--checkpoint",
            "f.ckpt",
            "--input",
            "data/test.ds",
            "--score",
            "uniformity",
        ],
    );
    assert_eq!(code(&no_ref), 3);
    ok(
        d,
        &[
            "score",
            "--checkpoint",
            "f.ckpt",
            "--input",
            "data/test.ds",
            "--score",
            "uniformity",
            "--reference",
            "data/train.ds",
        ],
    );
}

#[test]
fn rejects_checkpoint_of_another_version() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["gen-data", "--preset", "smoke", "--out", "data"]);
    ok(
        d,
        &["pretrain", "--preset", "smoke", "--data", "data", "--out", "p.ckpt"],
    );
    let bytes = std::fs::read(d.join("p.ckpt")).unwrap();
    let bumped = String::from_utf8_lossy(&bytes).replacen("{\"version\":1", "{\"version\":7", 1);
    std::fs::write(d.join("old.ckpt"), bumped.as_bytes()).unwrap();
    let out = elsa(d, &["eval", "--data", "data", "--checkpoint", "old.ckpt"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 7"));
}

#[test]
fn scenario_prints_final_auroc_and_writes_report() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(t.path(), &["scenario", "--preset", "smoke", "--out", "rep"]);
    assert!(out.contains("final test auroc"), "{out}");
    for f in ["runs.jsonl", "summary.csv", "report.json"] {
        assert!(t.path().join("rep").join(f).exists(), "{f}");
    }
    let sweep = ok(
        t.path(),
        &[
            "scenario",
            "--preset",
            "smoke",
            "--sweep-gamma-p",
            "0,0.1",
            "--seeds",
            "1",
            "--out",
            "sw",
        ],
    );
    assert_eq!(sweep.lines().count(), 2, "{sweep}");
}

#[test]
fn ablation_writes_one_row_per_pair() {
    let t = tempfile::tempdir().unwrap();
    let csv = ok(
        t.path(),
        &[
            "ablation",
            "--preset",
            "smoke",
            "--pairs",
            "energy/elsa,uniformity/elsa",
            "--out",
            "ab",
        ],
    );
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "score,loss,test_auroc");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("energy,elsa,"));
}
