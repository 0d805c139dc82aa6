use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tfec::synthetic::{two_tone, TwoToneSpec};

const SMALL: [&str; 8] = [
    "-o", "hidden1=8", "-o", "hidden2=8", "-o", "embed_dim=4", "-o", "epochs=2",
];

fn tfec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfec"))
        .args(args)
        .env("RAYON_NUM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let mut ds = two_tone(&TwoToneSpec { n, t: 32, ..TwoToneSpec::default() }, seed);
    ds.name = name.to_string();
    let path = dir.join(format!("{name}.ts"));
    fs::write(&path, ds.to_ts_text()).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let out = tfec(args);
    assert!(out.status.success(), "{args:?}: {}", stderr(&out));
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(SMALL);
    v
}

#[test]
fn stats_prints_one_row_per_corpus_sorted_by_name() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "Zeta", 6, 0);
    corpus(dir.path(), "Alpha", 8, 1);
    fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let out = run_ok(&["stats", dir.path().to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0][..5], ["name", "N", "T", "F", "classes"]);
    assert_eq!(rows[1][..5], ["Alpha", "8", "32", "1", "2"]);
    assert_eq!(rows[2][..5], ["Zeta", "6", "32", "1", "2"]);
    assert_eq!(rows.len(), 3);
}

#[test]
fn stats_missing_file_exits_2() {
    let out = tfec(&["stats", "/definitely/not/here.ts"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("file not found"));
}

#[test]
fn stats_parse_error_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("Bad.ts");
    fs::write(&bad, "@problemName Bad\n@classLabel true a b\n@data\n1,2,3:a\n1,x,3:b\n").unwrap();
    let out = tfec(&["stats", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("Bad.ts") && err.contains("line 5"), "{err}");
}

#[test]
fn train_writes_artifacts_and_zero_epochs_gives_header_only_losses() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), "Tones", 10, 2);
    let out_dir = dir.path().join("run");
    let mut args = with_small(&["train", "--data", data.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    args.extend(["-o", "epochs=0"]);
    let out = run_ok(&args);
    assert!(stderr(&out).contains("ACC="));
    assert_eq!(fs::read_to_string(out_dir.join("losses.csv")).unwrap(), "epoch,l_con,l_recon,l_total\n");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["epochs"], 0);
    assert_eq!(report["config"]["k"], 2);
    assert_eq!(report["config"]["batch_size"], 10);
    assert_eq!(report["config"]["crop_len"], 29);
    let emb = fs::read_to_string(out_dir.join("embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 10);
    assert!(emb.lines().all(|l| l.split(',').count() == 4));
    let assign = fs::read_to_string(out_dir.join("assignments.csv")).unwrap();
    assert_eq!(assign.lines().count(), 11);
    assert!(out_dir.join("model.json").exists());
}

#[test]
fn multi_seed_train_writes_subdirectories_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), "Tones", 10, 3);
    let out_dir = dir.path().join("seeds");
    run_ok(&with_small(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "1,2,3",
    ]));
    for s in 1..=3 {
        assert!(out_dir.join(format!("seed_{s}/report.json")).exists());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([1, 2, 3]));
    for m in ["acc", "nmi", "f1"] {
        assert!(summary["metrics"][m]["mean"].is_number());
        assert!(summary["metrics"][m]["std"].is_number());
    }
}

#[test]
fn repeated_train_is_byte_identical_apart_from_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), "Tones", 10, 4);
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        run_ok(&with_small(&["train", "--data", data.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]));
        let text = fs::read_to_string(out_dir.join("report.json")).unwrap();
        let kept: Vec<String> = text
            .lines()
            .filter(|l| !l.contains("wall_clock_seconds"))
            .map(String::from)
            .collect();
        reports.push(kept);
        assert_eq!(
            fs::read(out_dir.join("losses.csv")).unwrap(),
            fs::read(dir.path().join("a/losses.csv")).unwrap()
        );
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn config_errors_are_reported_together_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), "Tones", 10, 5);
    let out_dir = dir.path().join("never");
    let out = tfec(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "-o",
        "beta=2",
        "-o",
        "q=0",
        "-o",
        "use_pgcl=false",
        "-o",
        "use_read=false",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("beta") && err.contains("q 0") && err.contains("use_pgcl"), "{err}");
    assert!(!out_dir.exists());

    let out = tfec(&["train", "--data", data.to_str().unwrap(), "-o", "bogus=1", "-o", "alsobad=2"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("bogus") && err.contains("alsobad"), "{err}");
}

#[test]
fn config_file_values_yield_to_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), "Tones", 10, 6);
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        format!(r#"{{"dataset": {:?}, "epochs": 5, "alpha": 0.5}}"#, data.to_str().unwrap()),
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    run_ok(&with_small(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["epochs"], 2);
    assert_eq!(report["config"]["alpha"], 0.5);
}

#[test]
fn non_finite_training_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), "Tones", 10, 7);
    let nan_dir = dir.path().join("nan");
    let mut args = with_small(&["train", "--data", data.to_str().unwrap(), "--out", nan_dir.to_str().unwrap()]);
    args.extend(["-o", "lr=1e308", "-o", "epochs=5"]);
    let out = tfec(&args);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite loss at epoch"));
}

#[test]
fn ablate_writes_five_rows_per_seed_matching_train() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), "Tones", 10, 8);
    let out_dir = dir.path().join("abl");
    run_ok(&with_small(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "4,5",
    ]));
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,row,label,use_coeh,use_pgcl,use_read,ACC,F1,NMI,degraded");
    assert_eq!(lines.len(), 11);
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    assert_eq!(
        rows[..5].iter().map(|r| r[2]).collect::<Vec<_>>(),
        ["full", "-coeh", "-pgcl", "-read", "-pgcl-read"]
    );

    let train_dir = dir.path().join("train");
    run_ok(&with_small(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
        "--seed",
        "4",
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(train_dir.join("report.json")).unwrap()).unwrap();
    let nmi = report["metrics"]["nmi"].as_f64().unwrap();
    assert_eq!(rows[0][8], format!("{nmi:.6}"));
}

#[test]
fn compare_aug_writes_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), "Tones", 10, 9);
    let out_dir = dir.path().join("cmp");
    run_ok(&with_small(&[
        "compare-aug",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "1,2",
    ]));
    let csv = fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["coeh", "jitter", "scaling", "permutation", "crop", "mask"]);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",1 2")));
}

#[test]
fn sweep_runs_grid_and_emits_rerunnable_best_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), "Tones", 10, 10);
    let cfg = dir.path().join("sweep.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"dataset": {:?}, "grid": {{"alpha": [0.1, 1.0], "beta": [0.25, 0.75]}}}}"#,
            data.to_str().unwrap()
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("sweep");
    run_ok(&with_small(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]));
    for p in 0..4 {
        assert!(out_dir.join(format!("point_{p}/report.json")).exists());
    }
    let board = fs::read_to_string(out_dir.join("leaderboard.csv")).unwrap();
    let header: Vec<&str> = board.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "NMI_mean").unwrap();
    let nmis: Vec<f64> = board
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect();
    assert_eq!(nmis.len(), 4);
    assert!(nmis.windows(2).all(|w| w[0] >= w[1]));

    let rerun = dir.path().join("rerun");
    run_ok(&[
        "train",
        "--config",
        out_dir.join("best_config.json").to_str().unwrap(),
        "--out",
        rerun.to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(rerun.join("report.json")).unwrap()).unwrap();
    let best_nmi = report["metrics"]["nmi"].as_f64().unwrap();
    assert_eq!(format!("{best_nmi:.6}"), format!("{:.6}", nmis[0]));
}

#[test]
fn sweep_rejects_unknown_grid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), "Tones", 10, 11);
    let cfg = dir.path().join("sweep.json");
    fs::write(
        &cfg,
        format!(r#"{{"dataset": {:?}, "grid": {{"alhpa": [0.1]}}}}"#, data.to_str().unwrap()),
    )
    .unwrap();
    let out = tfec(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("alhpa"));
}
