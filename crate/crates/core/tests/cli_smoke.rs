use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const SMALL: &[&str] = &[
    "--image-size", "16", "--dim", "8", "--heads", "2", "--layers", "1", "--epochs", "2", "--k-demos", "2", "--batch", "8",
];

fn mgfuse(args: &[&str]) -> Output {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_mgfuse")).args(args).output().expect("spawn mgfuse");
    assert!(t.elapsed() < Duration::from_secs(60), "{args:?} took {:?}", t.elapsed());
    out
}

fn ok(args: &[&str]) -> Output {
    let out = mgfuse(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn synth(dir: &Path, classes: &str, per_class: &str) -> String {
    let d = dir.to_str().unwrap();
    ok(&["synth", "--out", d, "--classes", classes, "--per-class", per_class, "--size", "16", "--noise", "0.1"]);
    dir.join("manifest.csv").to_str().unwrap().to_string()
}

fn csv_rows(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

#[test]
fn synth_writes_manifest_transcripts_and_pngs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    ok(&["synth", "--out", d, "--classes", "3", "--per-class", "2", "--size", "8", "--png"]);
    assert_eq!(csv_rows(&tmp.path().join("manifest.csv")).len(), 7);
    assert_eq!(std::fs::read_dir(tmp.path().join("transcripts")).unwrap().count(), 3);
    assert_eq!(std::fs::read_dir(tmp.path().join("images")).unwrap().count(), 6);
}

#[test]
fn mine_selects_ten_percent_of_hundred() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("data"), "10", "10");
    let out = tmp.path().join("ambiguous.csv");
    ok(&["mine", "--manifest", &m, "--out", out.to_str().unwrap(), "--image-size", "16"]);
    let rows = csv_rows(&out);
    assert_eq!(rows[0], "id,cluster,silhouette");
    assert_eq!(rows.len(), 11);
}

#[test]
fn cv_with_ten_folds_then_report_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("data"), "3", "10");
    let cv = tmp.path().join("cv");
    ok(&with_small(&["cv", "--manifest", &m, "--out", cv.to_str().unwrap(), "--k", "10"]));
    let metrics = csv_rows(&cv.join("metrics.csv"));
    assert_eq!(metrics.len(), 1 + 10 + 2);
    assert!(metrics[11].starts_with("mean,") && metrics[12].starts_with("std,"));
    for f in ["confusion.csv", "perclass.csv", "predictions.csv", "history_fold9.csv"] {
        assert!(cv.join(f).is_file(), "{f}");
    }
    let rep = tmp.path().join("report");
    ok(&["report", "--predictions", cv.join("predictions.csv").to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    for f in ["metrics.csv", "confusion.csv", "perclass.csv"] {
        assert_eq!(std::fs::read(cv.join(f)).unwrap(), std::fs::read(rep.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_then_eval_and_prompts() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("data"), "3", "6");
    let tr = tmp.path().join("train");
    ok(&with_small(&["train", "--manifest", &m, "--out", tr.to_str().unwrap()]));
    for f in ["model.ckpt", "history.csv", "config.toml"] {
        assert!(tr.join(f).is_file(), "{f}");
    }
    let ev = tmp.path().join("eval");
    let ck = tr.join("model.ckpt");
    ok(&["eval", "--checkpoint", ck.to_str().unwrap(), "--manifest", &m, "--out", ev.to_str().unwrap()]);
    assert!(ev.join("metrics.csv").is_file() && ev.join("predictions.csv").is_file());

    let pr = tmp.path().join("prompts");
    ok(&["prompts", "--subjects", "MEMS", "--llm", "mock", "--out", pr.to_str().unwrap()]);
    assert_eq!(std::fs::read_dir(&pr).unwrap().count(), 1);
    // the mock only carries canned answers; anything else is an offline miss
    let miss = tmp.path().join("miss");
    let o = mgfuse(&["prompts", "--subjects", "MEMS,tips", "--llm", "mock", "--out", miss.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
    assert!(!miss.exists());
    let icl = tmp.path().join("icl");
    ok(&["prompts", "--icl", "--manifest", &m, "--out", icl.to_str().unwrap(), "--image-size", "16"]);
    assert_eq!(std::fs::read_dir(&icl).unwrap().count(), 18);
}

#[test]
fn ablate_and_sweep_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("data"), "3", "4");
    let ab = tmp.path().join("ablate");
    ok(&with_small(&["ablate", "--manifest", &m, "--out", ab.to_str().unwrap(), "--k", "2"]));
    let rows = csv_rows(&ab.join("ablation.csv"));
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("full,") && rows[4].starts_with("w/o MHA,"));
    let sw = tmp.path().join("sweep");
    ok(&with_small(&["sweep", "--manifest", &m, "--out", sw.to_str().unwrap(), "--k", "2", "--dims", "4,8", "--batches", "4"]));
    let rows = csv_rows(&sw.join("sweep.csv"));
    assert_eq!(rows[0], "\"(d, b)\",\"(4, 4)\",\"(8, 4)\"");
    assert!(rows[1].starts_with("Accuracy,"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(mgfuse(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mgfuse(&["cv", "--bogus"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("data"), "3", "2");
    let out = tmp.path().join("cv");
    let o = mgfuse(&["cv", "--manifest", &m, "--out", out.to_str().unwrap(), "--dim", "7", "--heads", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn data_errors_exit_three_without_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cv");
    let missing = tmp.path().join("nope.csv");
    let o = mgfuse(&["cv", "--manifest", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.csv"));
    assert!(!out.exists());

    let m = synth(&tmp.path().join("data"), "3", "4");
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, b"MGFCKPT\0garbage").unwrap();
    let ev = tmp.path().join("eval");
    let o = mgfuse(&["eval", "--checkpoint", bad.to_str().unwrap(), "--manifest", &m, "--out", ev.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!ev.exists() || std::fs::read_dir(&ev).unwrap().count() == 0);

    // listed image files that do not exist
    let man = tmp.path().join("files.csv");
    std::fs::write(&man, "id,path,label\na,missing_a.png,x\nb,missing_b.png,y\n").unwrap();
    let o = mgfuse(&["mine", "--manifest", man.to_str().unwrap(), "--out", tmp.path().join("m.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing_a.png") && err.contains("missing_b.png"), "{err}");
    assert!(!tmp.path().join("m.csv").exists());
}

#[test]
fn help_exits_zero() {
    let o = mgfuse(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("cv"));
}
