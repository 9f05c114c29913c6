mod common;

use common::{dubcount, run_pipeline};

#[test]
fn pipeline_outputs_are_complete_and_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_pipeline(a.path());
    let second = run_pipeline(b.path());
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &first {
        assert!(bytes == &second[name], "{name} differs between runs");
    }
    for expected in [
        "data/annotations.csv",
        "data/split.csv",
        "data/images/scene_0000.pgm",
        "data/densities/scene_0000.dmap",
        "model/checkpoint.dubn",
        "model/train_log.csv",
        "model/recal.csv",
        "model/calibration.svg",
        "pred/predictions.csv",
        "pred/metrics.csv",
        "pred/heatmaps/scene_0020_mean.pgm",
        "pred/heatmaps/scene_0020_epistemic.pgm",
        "pred/heatmaps/scene_0020_aleatoric.pgm",
        "pred/heatmaps/scene_0020_scale.txt",
    ] {
        assert!(first.contains_key(expected), "missing {expected}");
    }

    let predictions = String::from_utf8(first["pred/predictions.csv"].clone()).unwrap();
    let mut lines = predictions.lines();
    assert_eq!(lines.next(), Some("# intervals=calibrated coverage=0.9"));
    assert_eq!(lines.next(), Some("id,count_mean,count_std,lo,hi"));
    assert_eq!(lines.count(), 6);
    let metrics = String::from_utf8(first["pred/metrics.csv"].clone()).unwrap();
    assert!(metrics.starts_with("metric,value\nN,6\n"));
    assert!(metrics.contains("coverage_at_0.9"));
    let log = String::from_utf8(first["model/train_log.csv"].clone()).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(&first["data/images/scene_0000.pgm"][..2], b"P5");
}

#[test]
fn uncalibrated_predictions_are_flagged() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path());
    let out = dubcount(
        &[
            "predict",
            "--checkpoint",
            "model/checkpoint.dubn",
            "--data",
            "data",
            "--split",
            "val",
            "--out",
            "raw",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("raw/predictions.csv")).unwrap();
    assert!(text.starts_with("# intervals=uncalibrated coverage=0.9\n"));
    assert_eq!(text.lines().count(), 2 + 8);
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dubcount(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(dubcount(&["--version"], dir.path()).status.code(), Some(0));
    assert_eq!(
        dubcount(&["no-such-command"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        dubcount(&["train", "--variant", "bogus"], dir.path())
            .status
            .code(),
        Some(2)
    );
    let missing = dubcount(
        &[
            "calibrate",
            "--checkpoint",
            "nope.dubn",
            "--data",
            "nope",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(missing.status.code(), Some(1));
    assert!(!missing.stderr.is_empty());
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepochz = 1\n").unwrap();
    let bad = dubcount(&["--config", "bad.toml", "synth", "--out", "d"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn partition_command_writes_a_consistent_report() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path());
    let out = dubcount(
        &[
            "--config",
            "config.toml",
            "synth",
            "--out",
            "mosaic",
            "--mosaic",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let out = dubcount(
        &[
            "--config",
            "config.toml",
            "partition",
            "--checkpoint",
            "model/checkpoint.dubn",
            "--image",
            "mosaic/mosaic.pgm",
            "--recal",
            "model/recal.csv",
            "--threshold",
            "5",
            "--levels",
            "1,2,4",
            "--out",
            "part",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("part/partition.csv")).unwrap();
    let mut area = 0;
    let mut sum = 0.0;
    let mut total = None;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] == "total" {
            total = Some(f[5].parse::<f64>().unwrap());
        } else {
            area += f[2].parse::<usize>().unwrap() * f[3].parse::<usize>().unwrap();
            sum += f[5].parse::<f64>().unwrap();
        }
    }
    assert_eq!(area, 128 * 128);
    assert!((total.unwrap() - sum).abs() <= 1e-9 * sum.abs().max(1.0));
}
