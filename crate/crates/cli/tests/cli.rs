//! End-to-end runs of the `leakaudit` binary on a tiny synthetic corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn leakaudit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leakaudit")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = leakaudit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn prepare(dir: &Path, name: &str, n_items: &str) -> String {
    let data = dir.join(name);
    let data = data.to_str().unwrap();
    ok(&[
        "prepare", "--format", "synthetic", "--out", data, "--M", "3", "--N", "6", "--seed", "0", "--n-users", "30", "--n-items", n_items,
        "--slates-per-user", "6",
    ]);
    data.to_string()
}

fn write_config(dir: &Path, data: &str, out: &str) -> String {
    let path = dir.join(format!("{out}.cfg"));
    let text = format!(
        "data_dir = {data}\nout_dir = {out}\nencoder = attention\ndecoder = transformer\nm = 3\nn = 6\nd = 8\nbatch_size = 16\nlearning_rate = 0.01\nmax_epochs = 2\nseed = 1\n"
    );
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn prepare_train_eval_protect_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(dir.path(), "data", "40");
    for f in ["vocab.txt", "histories.tsv", "train.tsv", "valid.tsv", "test.tsv", "prepare.txt"] {
        assert!(Path::new(&data).join(f).exists(), "missing {f}");
    }
    let cfg = write_config(dir.path(), &data, "run");
    let run = dir.path().join("run");
    let printed = ok(&["train", &cfg, "--deterministic"]);
    assert!(printed.contains("checkpoint sha256"));
    for f in ["model.ckpt", "manifest.txt", "train_log.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(fs::read_to_string(run.join("train_log.csv")).unwrap().contains("epoch,train_loss,valid_recall@10,wall_seconds"));

    let refused = leakaudit(&["train", &cfg]);
    assert_eq!(refused.status.code(), Some(1), "existing checkpoint needs --force");
    let first = fs::read(run.join("model.ckpt")).unwrap();
    ok(&["train", &cfg, "--force"]);
    assert_eq!(first, fs::read(run.join("model.ckpt")).unwrap(), "retraining changed the checkpoint");

    let run_s = run.to_str().unwrap();
    let metrics = dir.path().join("metrics.csv");
    let per_example = dir.path().join("per_example.csv");
    ok(&["eval", "--model", run_s, "--data", &data, "--out", metrics.to_str().unwrap(), "--per-example", per_example.to_str().unwrap()]);
    let table = fs::read_to_string(&metrics).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("attention,transformer,")).count(), 3, "{table}");
    assert!(fs::read_to_string(&per_example).unwrap().lines().count() > 1);

    let out = dir.path().join("protect");
    let out_s = out.to_str().unwrap();
    ok(&["protect", "--model", run_s, "--data", &data, "--out", out_s, "--l-grid", "0,0.5,1", "--seeds", "0,1", "--batch-size", "8"]);
    let csv = fs::read_to_string(out.join("protection.csv")).unwrap();
    assert!(csv.contains("selection,replacement,L,seed"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 3 * 3 * 2);
    for f in ["recall.svg", "ndcg.svg", "accuracy.svg"] {
        assert!(fs::read_to_string(out.join(f)).unwrap().contains("<svg"));
    }

    let replot = dir.path().join("replot");
    ok(&["plot", "--csv", out.join("protection.csv").to_str().unwrap(), "--out", replot.to_str().unwrap()]);
    assert!(replot.join("accuracy.svg").exists());
}

#[test]
fn bad_config_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "encoder = conv\nd = many\n").unwrap();
    let out = leakaudit(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data_dir") && err.contains("`d`"), "{err}");
}

#[test]
fn unknown_flag_exits_with_usage_code() {
    assert_eq!(leakaudit(&["eval", "--bogus"]).status.code(), Some(2));
}

#[test]
fn vocabulary_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(dir.path(), "data", "40");
    let other = prepare(dir.path(), "other", "50");
    let cfg = write_config(dir.path(), &data, "run");
    ok(&["train", &cfg]);
    let run = dir.path().join("run");
    let out = leakaudit(&["eval", "--model", run.to_str().unwrap(), "--data", &other]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
}
