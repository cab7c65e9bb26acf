use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mcan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcan")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mcan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen-data", "--out", s(&data), "--samples", "40", "--image-size", "16", "--seed", "4"]);
    assert!(data.join("attributes.txt").exists());
    assert!(data.join("supports.json").exists());
    assert!(data.join("img00000.pgm").exists());

    ok(&[
        "train", "--out", s(&run), "--data", s(&data), "--epochs", "2", "--batch-size", "8",
        "--image-size", "16", "--feature-channels", "4", "--head-hidden", "2",
    ]);
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    let trace = csv_rows(&run.join("trace.csv"));
    assert_eq!(trace[0].join(","), "epoch,l_b,l_m,l_r,l_mask_l1,total,held_out_accuracy");
    assert_eq!(trace.len(), 3);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["command"], "train");
    assert_eq!(cfg["train"]["epochs"], 2);

    let eval = tmp.path().join("eval");
    ok(&["eval", "--out", s(&eval), "--data", s(&data), "--checkpoint", s(&ckpt)]);
    let acc = csv_rows(&eval.join("accuracy.csv"));
    assert_eq!(acc[0], ["attribute", "accuracy"]);
    assert_eq!(acc.len(), 8);
    assert_eq!(acc[7][0], "__mean__");
    let values: Vec<f64> = acc[1..7].iter().map(|r| r[1].parse().unwrap()).collect();
    let mean: f64 = acc[7][1].parse().unwrap();
    assert!((values.iter().sum::<f64>() / 6.0 - mean).abs() < 1e-12);

    let analyze = tmp.path().join("analyze");
    ok(&["analyze", "--out", s(&analyze), "--data", s(&data), "--checkpoint", s(&ckpt), "--subset", "all"]);
    for f in [
        "importance.csv",
        "feature_correlation.json",
        "feature_correlation.csv",
        "attribute_correlation.json",
        "attribute_correlation.csv",
        "localization.csv",
        "top_channels.json",
        "masks/attr0_ch0.pgm",
        "masks/attr5_index.json",
        "run_config.json",
    ] {
        assert!(analyze.join(f).exists(), "missing {f}");
    }

    let sweep = tmp.path().join("sweep");
    ok(&[
        "sweep", "--out", s(&sweep), "--data", s(&data), "--checkpoint", s(&ckpt),
        "--sigmas", "0,0.1", "--ns", "1,2", "--betas", "0,0.5",
    ]);
    let rows = csv_rows(&sweep.join("sweep.csv"));
    assert_eq!(rows.len(), 1 + 2 * 2 * 2 * 7);
    assert!(sweep.join("summary.csv").exists());
}

#[test]
fn curve_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let one = tmp.path().join("one");
    ok(&["curve", "--out", s(&one), "--n", "2", "--beta", "0.5", "--count", "5"]);
    let rows = csv_rows(&one.join("curve.csv"));
    assert_eq!(rows[0], ["m", "g"]);
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[1], ["0", "-0.5"]);
    assert_eq!(rows[5], ["1", "1"]);

    let many = tmp.path().join("many");
    ok(&["curve", "--out", s(&many), "--n", "1,3", "--beta", "0"]);
    assert!(many.join("curve_n1_beta0.csv").exists());
    assert!(many.join("curve_n3_beta0.csv").exists());
    assert_eq!(csv_rows(&many.join("curve_n3_beta0.csv")).len(), 102);
}

#[test]
fn config_file_is_read_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"curve": {"ns": [4], "betas": [1], "count": 3}}"#).unwrap();
    let out = tmp.path().join("out");
    ok(&["curve", "--out", s(&out), "--config", s(&cfg), "--count", "4"]);
    let rows = csv_rows(&out.join("curve.csv"));
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[1], ["0", "-1"]);
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(written["curve"]["count"], 4);
    assert_eq!(written["curve"]["ns"][0], 4.0);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(mcan(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mcan(&["curve"]).status.code(), Some(2));
    assert_eq!(mcan(&["curve", "--out", s(&out), "--count", "1"]).status.code(), Some(2));
    assert_eq!(mcan(&["curve", "--out", s(&out), "--n", "-1"]).status.code(), Some(2));
    assert_eq!(mcan(&["curve", "--out", s(&out), "--n", "1,2,3", "--beta", "0,1"]).status.code(), Some(2));
    assert_eq!(mcan(&["gen-data", "--out", s(&out), "--attributes", "circle,unicorn"]).status.code(), Some(2));
    assert_eq!(mcan(&["train", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(mcan(&["eval", "--out", s(&out), "--data", s(&out)]).status.code(), Some(2));

    let missing = tmp.path().join("nope.ckpt");
    let r = mcan(&["eval", "--out", s(&out), "--data", s(&out), "--checkpoint", s(&missing)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("nope.ckpt"));

    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let r = mcan(&["eval", "--out", s(&out), "--data", s(&out), "--checkpoint", s(&bad)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("magic"));

    let cfg = tmp.path().join("broken.json");
    fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(mcan(&["curve", "--out", s(&out), "--config", s(&cfg)]).status.code(), Some(2));
}
