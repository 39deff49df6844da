use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn churnkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_churnkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = churnkit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_logits(path: &Path, rows: &[&[f64]]) {
    let k = rows[0].len();
    let mut text = (0..k).map(|j| format!("c{j}")).collect::<Vec<_>>().join(",") + "\n";
    for r in rows {
        text += &(r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n");
    }
    fs::write(path, text).unwrap();
}

fn write_labels(path: &Path, labels: &[usize]) {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, format!("label\n{text}")).unwrap();
}

fn fixture(dir: &Path) {
    write_logits(
        &dir.join("base.csv"),
        &[&[2.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 2.0], &[2.0, 0.0, 0.0]],
    );
    write_logits(
        &dir.join("new.csv"),
        &[&[3.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 0.0, 2.0], &[0.0, 0.5, 0.0]],
    );
    write_labels(&dir.join("y.csv"), &[0, 1, 1, 0]);
}

/// Two MLPs trained on a synthetic blob set, with checkpoints on the
/// training samples.
fn trained_pair(dir: &Path) {
    ok_json(
        dir,
        &[
            "synth",
            "--classes",
            "3",
            "--samples",
            "240",
            "--spread",
            "1.5",
            "--seed",
            "2",
            "--out-features",
            "x.lgt",
            "--out-labels",
            "y.lbl",
        ],
    );
    for (seed, out) in [("1", "base"), ("2", "new")] {
        ok_json(
            dir,
            &[
                "train",
                "--features",
                "x.lgt",
                "--labels",
                "y.lbl",
                "--hidden",
                "8",
                "--epochs",
                "8",
                "--seed",
                seed,
                "--out-dir",
                out,
            ],
        );
    }
}

#[test]
fn identical_models_have_no_churn() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let r = ok_json(
        dir.path(),
        &["churn", "--base", "base.csv", "--new", "base.csv", "--labels", "y.csv"],
    );
    assert_eq!(r["churn"], 0.0);
    assert_eq!(r["relevant_churn"], 0.0);
    assert_eq!(r["negative_flips"], 0);
}

#[test]
fn churn_report_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let r = ok_json(
        dir.path(),
        &["churn", "--base", "base.csv", "--new", "new.csv", "--labels", "y.csv"],
    );
    assert_eq!(r["n"], 4);
    assert_eq!(r["churn"], 0.5);
    assert_eq!(r["relevant_churn"], 0.5);
    assert_eq!(r["negative_flips"], 2);
    assert_eq!(r["positive_flips"], 0);
    assert_eq!(r["benign_flips"], 0);
    assert_eq!(r["base_accuracy"], 0.75);
    assert_eq!(r["new_accuracy"], 0.25);
}

#[test]
fn manifest_goes_to_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    ok_json(
        dir.path(),
        &[
            "churn",
            "--base",
            "base.csv",
            "--new",
            "new.csv",
            "--labels",
            "y.csv",
            "--out-dir",
            "run",
        ],
    );
    let m: Value = serde_json::from_slice(&fs::read(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "churn");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 3);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_input_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = churnkit(
        dir.path(),
        &["churn", "--base", "nope.csv", "--new", "new.csv", "--labels", "y.csv"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn shape_mismatch_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    write_labels(&dir.path().join("short.csv"), &[0, 1]);
    let out = churnkit(
        dir.path(),
        &[
            "churn",
            "--base",
            "base.csv",
            "--new",
            "new.csv",
            "--labels",
            "short.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty());
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(churnkit(dir.path(), &["churn", "--bogus"]).status.code(), Some(2));
    assert_eq!(churnkit(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn conf_choices_follow_the_scores() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let r = ok_json(
        dir.path(),
        &[
            "amc",
            "--mode",
            "conf",
            "--base",
            "base.csv",
            "--new",
            "new.csv",
            "--labels",
            "y.csv",
            "--out-dir",
            "out",
        ],
    );
    let text = fs::read_to_string(dir.path().join("out/choices.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,choice,conf_base,conf_new"));
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], i.to_string());
        let (b, n): (f64, f64) = (f[2].parse().unwrap(), f[3].parse().unwrap());
        assert_eq!(f[1], if n > b { "new" } else { "base" });
        rows += 1;
    }
    assert_eq!(rows, 4);
    let combined = &r["combined"];
    assert!(combined["relevant_churn"].as_f64().unwrap() <= r["new_model"]["relevant_churn"].as_f64().unwrap());
    assert!(dir.path().join("out/combined.lgt").exists());
}

#[test]
fn combined_has_no_more_negative_flips_than_conf() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained_pair(d);
    let common = [
        "--base",
        "base/logits.lgt",
        "--new",
        "new/logits.lgt",
        "--labels",
        "y.lbl",
    ];
    let conf = ok_json(
        d,
        &[&["amc", "--mode", "conf", "--out-dir", "conf"][..], &common].concat(),
    );
    let combined = ok_json(
        d,
        &[
            &["amc", "--mode", "combined", "--out-dir", "combined"][..],
            &common,
            &[
                "--base-checkpoints",
                "base/checkpoints.txt",
                "--new-checkpoints",
                "new/checkpoints.txt",
            ],
        ]
        .concat(),
    );
    let nf = |v: &Value| v["combined"]["negative_flips"].as_u64().unwrap();
    assert!(nf(&combined) <= nf(&conf));
    assert!(nf(&conf) <= conf["new_model"]["negative_flips"].as_u64().unwrap());
    let header = fs::read_to_string(d.join("combined/choices.csv")).unwrap();
    assert!(header.starts_with("index,choice,conf_base,conf_new,avgconf_base,avgconf_new\n"));
}

#[test]
fn learned_combiner_picks_the_reliable_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // The new model is always right with a margin; the base is right on
    // every other sample.
    let n = 120;
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 / 3) % 2).collect();
    let row = |c: usize, m: f64| if c == 0 { vec![m, -m] } else { vec![-m, m] };
    let new: Vec<Vec<f64>> = labels.iter().map(|&y| row(y, 1.0)).collect();
    let base: Vec<Vec<f64>> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| row(if i % 2 == 0 { y } else { 1 - y }, 2.0))
        .collect();
    write_logits(&d.join("b.csv"), &base.iter().map(Vec::as_slice).collect::<Vec<_>>());
    write_logits(&d.join("n.csv"), &new.iter().map(Vec::as_slice).collect::<Vec<_>>());
    write_labels(&d.join("y.csv"), &labels);
    let r = ok_json(
        d,
        &[
            "amc",
            "--mode",
            "learned",
            "--base",
            "b.csv",
            "--new",
            "n.csv",
            "--labels",
            "y.csv",
            "--val-base",
            "b.csv",
            "--val-new",
            "n.csv",
            "--val-labels",
            "y.csv",
            "--folds",
            "3",
            "--out-dir",
            "out",
        ],
    );
    assert_eq!(r["combined"]["new_accuracy"], 1.0);
    assert_eq!(r["meta"]["kind"], "linear_logistic");
    assert!(d.join("out/meta.amcm").exists());
}

#[test]
fn learned_mode_requires_validation_data() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = churnkit(
        dir.path(),
        &[
            "amc",
            "--mode",
            "learned",
            "--base",
            "base.csv",
            "--new",
            "new.csv",
            "--labels",
            "y.csv",
            "--out-dir",
            "out",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn calibrate_with_one_bin() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let r = ok_json(
        dir.path(),
        &[
            "calibrate",
            "--logits",
            "new.csv",
            "--labels",
            "y.csv",
            "--bins",
            "1",
            "--out-dir",
            "cal",
        ],
    );
    assert_eq!(r["before"]["bins"].as_array().unwrap().len(), 1);
    assert_eq!(r["before"]["bins"][0]["count"], 4);
    let f = |v: &Value| v.as_f64().unwrap();
    let gap = (f(&r["accuracy"]) - f(&r["before"]["bins"][0]["mean_confidence"])).abs();
    assert!((f(&r["before"]["ece"]) - gap).abs() < 1e-5);
    let t = r["fit"]["temperature"].as_f64().unwrap();
    assert!(t > 0.0);
    let csv = fs::read_to_string(dir.path().join("cal/reliability_after.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(dir.path().join("cal/calibrated.lgt").exists());
}

#[test]
fn selfconsistency_with_zero_epochs_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let r = ok_json(dir.path(), &["selfconsistency", "--epochs", "0", "--out-dir", "sc"]);
    assert_eq!(r["epochs"], 0);
    let trace = fs::read_to_string(dir.path().join("sc/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
    assert!(trace.starts_with("epoch,train_accuracy,"));
}

#[test]
fn selfconsistency_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "selfconsistency",
        "--constrained",
        "--epochs",
        "25",
        "--hidden",
        "8",
        "--seed",
        "3",
    ];
    let a = churnkit(dir.path(), &args);
    let b = churnkit(dir.path(), &args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let other = churnkit(
        dir.path(),
        &[
            "selfconsistency",
            "--constrained",
            "--epochs",
            "25",
            "--hidden",
            "8",
            "--seed",
            "4",
        ],
    );
    assert_ne!(a.stdout, other.stdout);
}

#[test]
fn distill_with_zero_alpha_reproduces_cold_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained_pair(d);
    let common = [
        "--features",
        "x.lgt",
        "--labels",
        "y.lbl",
        "--hidden",
        "8",
        "--epochs",
        "5",
        "--seed",
        "9",
    ];
    ok_json(d, &[&["train", "--out-dir", "cold"][..], &common].concat());
    ok_json(
        d,
        &[
            &[
                "train",
                "--mode",
                "distill",
                "--alpha",
                "0",
                "--base",
                "base/model.mlp",
                "--out-dir",
                "zero",
            ][..],
            &common,
        ]
        .concat(),
    );
    ok_json(
        d,
        &[
            &[
                "train",
                "--mode",
                "distill",
                "--alpha",
                "0.5",
                "--base",
                "base/model.mlp",
                "--out-dir",
                "half",
            ][..],
            &common,
        ]
        .concat(),
    );
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("cold/logits.lgt"), read("zero/logits.lgt"));
    assert_eq!(read("cold/model.mlp"), read("zero/model.mlp"));
    assert_ne!(read("cold/logits.lgt"), read("half/logits.lgt"));
}

#[test]
fn warm_start_without_base_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok_json(
        d,
        &[
            "synth",
            "--samples",
            "50",
            "--out-features",
            "x.lgt",
            "--out-labels",
            "y.lbl",
        ],
    );
    let out = churnkit(
        d,
        &[
            "train",
            "--features",
            "x.lgt",
            "--labels",
            "y.lbl",
            "--mode",
            "warm",
            "--out-dir",
            "w",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn trains_a_separable_toy_problem() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok_json(
        d,
        &[
            "synth",
            "--samples",
            "300",
            "--separation",
            "4",
            "--spread",
            "0.5",
            "--seed",
            "5",
            "--out-features",
            "x.csv",
            "--out-labels",
            "y.csv",
        ],
    );
    let r = ok_json(
        d,
        &[
            "train",
            "--features",
            "x.csv",
            "--labels",
            "y.csv",
            "--hidden",
            "16",
            "--epochs",
            "40",
            "--lr",
            "0.01",
            "--out-dir",
            "m",
        ],
    );
    assert!(r["train_accuracy"].as_f64().unwrap() >= 0.99);
    let ckpts = fs::read_to_string(d.join("m/checkpoints.txt")).unwrap();
    assert_eq!(ckpts.lines().count(), r["epochs_run"].as_u64().unwrap() as usize);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok_json(
        d,
        &[
            "synth",
            "--samples",
            "60",
            "--out-features",
            "x.lgt",
            "--out-labels",
            "y.lbl",
        ],
    );
    fs::write(d.join("run.cfg"), "epochs = 7\nseed = 3\n").unwrap();
    let r = ok_json(
        d,
        &[
            "train",
            "--features",
            "x.lgt",
            "--labels",
            "y.lbl",
            "--config",
            "run.cfg",
            "--seed",
            "4",
            "--hidden",
            "4",
            "--out-dir",
            "m",
        ],
    );
    assert_eq!(r["config"]["epochs"], 7);
    assert_eq!(r["config"]["seed"], 4);
    fs::write(d.join("bad.cfg"), "epochs = many\n").unwrap();
    let out = churnkit(
        d,
        &[
            "train",
            "--features",
            "x.lgt",
            "--labels",
            "y.lbl",
            "--config",
            "bad.cfg",
            "--out-dir",
            "b",
        ],
    );
    assert_ne!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
}

/// Logits with labels drawn from `softmax(z / t)`.
fn tempered_fixture(path: &Path, labels: &Path, t: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (4000, 5);
    let mut rows = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w: Vec<f64> = z.iter().map(|v| (v / t).exp()).collect();
        let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
        let y = w
            .iter()
            .position(|&p| {
                u -= p;
                u < 0.0
            })
            .unwrap_or(k - 1);
        rows.push(z);
        ys.push(y);
    }
    write_logits(path, &rows.iter().map(Vec::as_slice).collect::<Vec<_>>());
    write_labels(labels, &ys);
}

#[test]
fn calibrate_recovers_the_temperature() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tempered_fixture(&d.join("hot.csv"), &d.join("hot_y.csv"), 2.0, 1);
    let r = ok_json(d, &["calibrate", "--logits", "hot.csv", "--labels", "hot_y.csv"]);
    let t = r["fit"]["temperature"].as_f64().unwrap();
    assert!((1.9..=2.1).contains(&t), "T = {t}");
    assert!(r["after"]["ece"].as_f64().unwrap() < r["before"]["ece"].as_f64().unwrap());

    tempered_fixture(&d.join("ok.csv"), &d.join("ok_y.csv"), 1.0, 2);
    let r = ok_json(d, &["calibrate", "--logits", "ok.csv", "--labels", "ok_y.csv"]);
    let t = r["fit"]["temperature"].as_f64().unwrap();
    assert!((t - 1.0).abs() < 0.1, "T = {t}");
    let (before, after) = (
        r["before"]["ece"].as_f64().unwrap(),
        r["after"]["ece"].as_f64().unwrap(),
    );
    assert!((before - after).abs() < 0.02);
}
