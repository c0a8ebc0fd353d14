use std::path::Path;
use std::process::{Command, Output};

use gpda_core::datagen::{two_moons_shift, write_dataset};

const FAST: [&str; 10] = ["--n", "60", "--hidden", "8", "--feature-dim", "3", "--M", "4", "--steps", "15"];

fn gpda(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpda"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with(base: &[&str], extra: &[&'static str]) -> Vec<String> {
    extra.iter().chain(base).map(|s| s.to_string()).collect()
}

fn run(cwd: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    gpda(cwd, &refs)
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn train_smoke_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = gpda(
        dir.path(),
        &["train", "--dataset", "two-moons", "--rotation", "30", "--steps", "2000", "--seed", "1", "--out", "runs/a"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("runs/a");
    for f in ["model.ckpt", "history.csv", "manifest.toml"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert_eq!(csv_rows(&out.join("history.csv")).len(), 2000);
    let manifest: toml::Table = toml::from_str(&std::fs::read_to_string(out.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest["train"]["seed"].as_integer(), Some(1));
    assert_eq!(manifest["dataset"]["rotation"].as_float(), Some(30.0));
    assert!(manifest["duration_s"].as_float().unwrap() > 0.0);
    assert!(manifest["outputs"].get("checkpoint").is_some());
    // nothing outside --out
    let top: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(top, vec![std::ffi::OsString::from("runs")]);
}

#[test]
fn missing_csv_path_is_a_usage_error_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = gpda(dir.path(), &["train", "--dataset", "csv", "--source", "s.csv", "--out", "o"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--target-train"), "{}", stderr(&o));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn nonexistent_csv_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = gpda(
        dir.path(),
        &["train", "--dataset", "csv", "--source", "s.csv", "--target-train", "t.csv", "--target-test", "u.csv", "--out", "o"],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gpda(dir.path(), &["train", "--bogus", "--out", "o"])), 2);
    assert_eq!(code(&gpda(dir.path(), &["train", "--lr", "-1", "--out", "o"])), 2);
    assert_eq!(code(&gpda(dir.path(), &["train", "--dataset", "blobs", "--rotation", "5", "--out", "o"])), 2);
}

#[test]
fn separation_column_is_logged_without_weight() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &with(&FAST, &["train", "--lambda", "0", "--out", "o"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(dir.path().join("o/history.csv")).unwrap();
    let ms = r.headers().unwrap().iter().position(|h| h == "ms").unwrap();
    for rec in r.records() {
        let v: f64 = rec.unwrap()[ms].parse().unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
}

#[test]
fn manifest_reproduces_the_run_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &with(&FAST, &["train", "--seed", "4", "--lr", "0.01", "--out", "a"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = gpda(dir.path(), &["train", "--config", "a/manifest.toml", "--out", "b"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["history.csv", "model.ckpt"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn mcda_train_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &with(&FAST, &["train", "--method", "mcda", "--out", "m"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = gpda(dir.path(), &["eval", "--checkpoint", "m/model.ckpt", "--config", "m/manifest.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("target-test accuracy"));
    let o = gpda(dir.path(), &["report", "--checkpoint", "m/model.ckpt", "--config", "m/manifest.toml", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(csv_rows(&dir.path().join("r/report.csv")).len(), 30);
    assert!(dir.path().join("r/hist_bpd.csv").is_file());
}

#[test]
fn eval_after_training_beats_the_initial_model_on_source() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--n", "200", "--hidden", "16", "--feature-dim", "4", "--M", "10", "--lr", "0.01", "--seed", "2"];
    let o = run(dir.path(), &with(&common, &["train", "--steps", "0", "--out", "init"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(dir.path(), &with(&common, &["train", "--steps", "300", "--out", "done"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let acc = |run: &str| -> f64 {
        let o = gpda(
            dir.path(),
            &["eval", "--checkpoint", &format!("{run}/model.ckpt"), "--config", &format!("{run}/manifest.toml"), "--split", "source"],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        stdout(&o).split_whitespace().last().unwrap().parse().unwrap()
    };
    assert!(acc("done") >= acc("init"));
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = gpda(dir.path(), &["eval", "--checkpoint", "nope.ckpt"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("nope.ckpt"));
    let o = gpda(dir.path(), &["report", "--checkpoint", "nope.ckpt", "--out", "r"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn report_histograms_partition_the_test_set() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &with(&FAST, &["train", "--out", "a"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = gpda(
        dir.path(),
        &["report", "--checkpoint", "a/model.ckpt", "--config", "a/manifest.toml", "--bayes-mode", "midpoint", "--out", "r"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for h in ["hist_bd.csv", "hist_bayes_err.csv"] {
        let total: usize = csv_rows(&dir.path().join("r").join(h))
            .iter()
            .map(|r| r[2].parse::<usize>().unwrap() + r[3].parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, 30, "{h}");
    }
    let header = csv::Reader::from_path(dir.path().join("r/report.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(header.iter().collect::<Vec<_>>(), ["id", "pred", "runner_up", "true", "correct", "bd", "bayes_err", "bpd"]);
}

#[test]
fn compare_writes_methods_by_seeds_plus_means() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &with(&FAST, &["compare", "--seeds", "0,1,2,3,4", "--mcda-n", "2", "--out", "c"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("c/summary.csv"));
    assert_eq!(rows.len(), 3 * 5 + 3);
    assert_eq!(rows.iter().filter(|r| &r[1] == "mean").count(), 3);
    for m in ["gpda", "mcda", "source-only"] {
        assert_eq!(rows.iter().filter(|r| &r[0] == m).count(), 6);
    }
}

#[test]
fn ablate_shapes_and_empty_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &with(&FAST, &["ablate", "--lambda-grid", "0,1,10,50", "--seeds", "0,1", "--out", "l"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("l/ablation.csv"));
    assert_eq!(rows.len(), 4 * 2);
    assert!(rows.iter().all(|r| &r[0] == "lambda"));
    let o = run(dir.path(), &with(&FAST, &["ablate", "--out", "e"]));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("grid"));
}

#[test]
fn gradcheck_passes_and_reports_worst_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = gpda(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("worst relative error")).unwrap().to_string();
    let worst: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(worst <= 1e-4, "{line}");
}

#[test]
fn gradcheck_with_a_coarse_step_uses_a_wider_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = gpda(dir.path(), &["gradcheck", "--h", "1e-3", "--points", "20"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("tolerance 1.0e-2"));
}

#[test]
fn gradcheck_catches_a_corrupted_backward_rule() {
    let dir = tempfile::tempdir().unwrap();
    let o = gpda(dir.path(), &["gradcheck", "--points", "3", "--inject-fault", "tanh-backward"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("ll/net"), "{}", stderr(&o));
    assert!(stderr(&o).contains("segment"));
}

#[test]
fn csv_datasets_train_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = two_moons_shift(40, 30.0, 0.1, 0).unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let o = gpda(
        dir.path(),
        &[
            "train", "--dataset", "csv", "--source", "source.csv", "--target-train", "target_train.csv", "--target-test",
            "target_test.csv", "--hidden", "8", "--feature-dim", "3", "--M", "4", "--steps", "10", "--out", "o",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}
