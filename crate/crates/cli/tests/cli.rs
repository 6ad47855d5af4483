use std::path::Path;
use std::process::{Command, Output};

use ndarray::array;
use reside_cli::{delta_percent, EvalMetrics, RunManifest};
use reside_core::aggregate::TrainReport;
use reside_core::clustering::ProbeSet;
use reside_core::csf::{CsfKind, PNormConfig, ScoreMatrix};
use reside_core::feature_store::{self, FeatureDataset};

fn reside(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reside"))
        .args(args)
        .env("RESIDE_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    for (name, seed) in [("train", "1"), ("val", "2"), ("test", "3")] {
        let out = reside(&[
            "gen-synthetic", "--spec", "mixture", "--m", "300", "--l", "3", "--h", "3", "--seed", seed,
            "--out", s(&p(name)),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(code(&reside(&["cluster", "--train", s(&p("train")), "--out", s(&p("probes.json"))])), 0);
    let out = reside(&[
        "score", "--data", s(&p("val")), "--probes", s(&p("probes.json")), "--csf", "ne",
        "--pnorm-grid", "1,2,4", "--out", s(&p("val.bin")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let val = ScoreMatrix::read(&p("val.bin")).unwrap();
    let (test_dir, probes) = (p("test"), p("probes.json"));
    let mut test_args = vec!["score", "--data", s(&test_dir), "--probes", s(&probes), "--csf", "ne"];
    let p_value = val.pnorm.p.map(|v| v.to_string());
    match &p_value {
        Some(v) => test_args.extend(["--pnorm-p", v.as_str()]),
        None => test_args.push("--no-pnorm"),
    }
    let test_out = p("test.bin");
    test_args.extend(["--out", s(&test_out)]);
    assert_eq!(code(&reside(&test_args)), 0);
    assert_eq!(ScoreMatrix::read(&test_out).unwrap().pnorm, val.pnorm);

    assert_eq!(
        code(&reside(&[
            "train", "--val-scores", s(&p("val.bin")), "--val-data", s(&p("val")), "--epochs", "20",
            "--out", s(&p("report.json")),
        ])),
        0
    );
    let report = TrainReport::read(&p("report.json")).unwrap();
    assert_eq!(report.loss_curve.len(), 21);
    assert_eq!(report.config.learning_rate, 0.1);
    assert_eq!(report.config.batch_size, 16);

    assert_eq!(
        code(&reside(&[
            "eval", "--test-scores", s(&test_out), "--test-data", s(&p("test")), "--weights",
            s(&p("report.json")), "--out-prefix", s(&p("test")),
        ])),
        0
    );
    let metrics: EvalMetrics = serde_json::from_slice(&std::fs::read(p("test.metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.samples, 300);
    let csv = std::fs::read_to_string(p("test.rc.csv")).unwrap();
    assert!(csv.starts_with("coverage,risk,threshold,mass\n"));
    assert_eq!(csv.lines().count(), 301);

    for manifest in ["probes.run.json", "val.run.json", "report.run.json", "test.run.json", "train/run.json"] {
        let m: RunManifest = serde_json::from_slice(&std::fs::read(p(manifest)).unwrap()).unwrap();
        assert!(!m.outputs.is_empty() || m.command == "gen-synthetic", "{manifest}");
    }
    // gen-synthetic's own manifest does not disturb the dataset loader
    feature_store::load_dataset(&p("train")).unwrap();
}

#[test]
fn planted_k_is_recovered_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("planted");
    let probes = dir.path().join("probes.json");
    assert_eq!(
        code(&reside(&[
            "gen-synthetic", "--spec", "planted-k", "--m", "240", "--l", "2", "--k", "3", "--seed", "5",
            "--out", s(&data),
        ])),
        0
    );
    assert_eq!(code(&reside(&["cluster", "--train", s(&data), "--out", s(&probes), "--seed", "1"])), 0);
    assert_eq!(ProbeSet::read(&probes).unwrap().ks(), vec![3, 3]);
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(code(&reside(&["gen-synthetic", "--spec", "separable", "--m", "40", "--l", "1", "--out", s(&data)])), 0);
    let out = reside(&["cluster", "--train", s(&data), "--out", "x.json", "--k-min", "5", "--k-max", "3"]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&reside(&["cluster", "--bogus"])), 2);
    assert_eq!(
        code(&reside(&[
            "score", "--data", s(&data), "--probes", "p.json", "--csf", "msp", "--no-pnorm", "--pnorm-grid", "2",
            "--out", "o.bin",
        ])),
        2
    );
    assert_eq!(code(&reside(&["score", "--data", "d", "--probes", "p", "--csf", "softmax", "--out", "o"])), 2);
    assert_eq!(code(&reside(&["--help"])), 0);
}

#[test]
fn data_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = reside(&["cluster", "--train", s(&missing), "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let data = dir.path().join("d");
    assert_eq!(code(&reside(&["gen-synthetic", "--spec", "separable", "--m", "40", "--l", "2", "--out", s(&data)])), 0);
    std::fs::remove_file(data.join("layer_2.bin")).unwrap();
    assert_eq!(code(&reside(&["cluster", "--train", s(&data), "--out", s(&dir.path().join("p.json"))])), 1);
}

/// Four samples where the lone wrong one is ranked first by a thin margin.
fn write_counterexample(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("ce");
    let ds = FeatureDataset::new(
        vec![array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0]]],
        array![[1.0f32, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]],
        vec![1, 0, 0, 0],
        vec![1; 4],
        1,
    )
    .unwrap();
    feature_store::write_dataset(&ds, &data).unwrap();
    let scores = dir.join("ce.bin");
    ScoreMatrix::from_rows(
        vec![vec![1.01, 0.0], vec![1.0, 0.0], vec![1.001, 0.0], vec![1.002, 0.0]],
        CsfKind::Ml,
        PNormConfig::identity(),
        ds.content_hash(),
    )
    .unwrap()
    .write(&scores)
    .unwrap();
    let weights = dir.join("w.json");
    std::fs::write(&weights, "[1.0, 0.0]").unwrap();
    (data, scores, weights)
}

#[test]
fn bound_violation_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let (data, scores, weights) = write_counterexample(dir.path());
    let report = dir.path().join("bound.json");
    let out = reside(&[
        "bound-check", "--scores", s(&scores), "--data", s(&data), "--weights", s(&weights), "--out", s(&report),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let written: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!((written["aurc"].as_f64().unwrap() - 25.0 / 48.0).abs() < 1e-12);
    assert_eq!(written["loose_holds"], false);
    assert!(dir.path().join("bound.run.json").exists());
}

#[test]
fn bound_check_passes_on_a_well_separated_instance() {
    let dir = tempfile::tempdir().unwrap();
    let (data, scores, _) = write_counterexample(dir.path());
    let weights = dir.path().join("flip.json");
    std::fs::write(&weights, "[-1.0, 0.0]").unwrap();
    let out = reside(&["bound-check", "--scores", s(&scores), "--data", s(&data), "--weights", s(&weights)]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["loose_holds"], true);
}

#[test]
fn bound_check_skips_degenerate_data() {
    let dir = tempfile::tempdir().unwrap();
    let (data, scores, weights) = write_counterexample(dir.path());
    let ds = feature_store::load_dataset(&data).unwrap();
    let clean = FeatureDataset::new(ds.layers().to_vec(), ds.final_logits().to_owned(), vec![0; 4], vec![1; 4], 1).unwrap();
    feature_store::write_dataset(&clean, &data).unwrap();
    let out = reside(&["bound-check", "--scores", s(&scores), "--data", s(&data), "--weights", s(&weights)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("skipped"));
}

#[test]
fn mismatched_weights_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, scores, _) = write_counterexample(dir.path());
    let weights = dir.path().join("w3.json");
    std::fs::write(&weights, "[1.0, 0.0, 0.0]").unwrap();
    let out = reside(&[
        "eval", "--test-scores", s(&scores), "--test-data", s(&data), "--weights", s(&weights), "--out-prefix",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn final_logit_weights_report_zero_delta() {
    let dir = tempfile::tempdir().unwrap();
    let (data, scores, _) = write_counterexample(dir.path());
    let weights = dir.path().join("last.json");
    std::fs::write(&weights, "[0.0, 1.0]").unwrap();
    let prefix = dir.path().join("e");
    let out = reside(&[
        "eval", "--test-scores", s(&scores), "--test-data", s(&data), "--weights", s(&weights), "--out-prefix",
        s(&prefix),
    ]);
    assert_eq!(code(&out), 0);
    let metrics: EvalMetrics =
        serde_json::from_slice(&std::fs::read(dir.path().join("e.metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.aurc_reside, metrics.aurc_baseline);
    assert_eq!(format!("{:.2}", metrics.delta_percent), "0.00");
}

#[test]
fn reported_reduction_matches_the_published_row() {
    // ML baseline 0.7271 reduced to 0.2214
    assert_eq!(format!("{:.2}", delta_percent(0.7271, 0.2214)), "69.55");
    assert_eq!(delta_percent(0.0, 0.0), 0.0);
}
