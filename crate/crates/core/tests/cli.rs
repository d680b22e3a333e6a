use std::fs;
use std::path::{Path, PathBuf};

use magsr::cli::main_with_args;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("magsr").chain(args.iter().copied()))
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Synthesizes a small dataset and split under `root`.
fn prepare(root: &Path, count: &str) -> (PathBuf, PathBuf) {
    let ds = root.join("ds");
    let sp = root.join("sp");
    assert_eq!(run(&["synth", "--out", &s(&ds), "--synth.count", count]), 0);
    assert_eq!(run(&["split", "--out", &s(&sp), "--data.dataset", &s(&ds)]), 0);
    (ds, sp)
}

fn train_small(root: &Path, ds: &Path, sp: &Path, variant: &str) -> PathBuf {
    let tr = root.join(format!("tr-{variant}"));
    let split = s(&sp.join("split.json"));
    let code = run(&[
        "train", "--out", &s(&tr), "--data.dataset", &s(ds), "--data.split", &split, "--train.variant", variant,
        "--model.base_channels", "4", "--model.depth", "2", "--train.epochs", "1",
    ]);
    assert_eq!(code, 0);
    tr
}

#[test]
fn synth_writes_requested_count_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        assert_eq!(run(&["synth", "--out", &s(dir), "--synth.count", "10", "--seed", "3"]), 0);
    }
    let manifest = json(a.join("manifest.json"));
    assert_eq!(manifest["ids"].as_array().unwrap().len(), 10);
    let names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    fs::create_dir(&out).unwrap();
    assert_eq!(run(&["synth", "--out", &s(&out), "--synth.count", "4"]), 1);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
    // A non-empty directory that no run produced is never replaced.
    fs::write(out.join("keep.txt"), "mine").unwrap();
    assert_eq!(run(&["synth", "--out", &s(&out), "--synth.count", "4", "--force"]), 1);
    assert!(out.join("keep.txt").exists());
}

#[test]
fn force_replaces_a_previous_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    assert_eq!(run(&["synth", "--out", &s(&out), "--synth.count", "4"]), 0);
    assert_eq!(run(&["synth", "--out", &s(&out), "--synth.count", "6", "--force"]), 0);
    assert_eq!(json(out.join("manifest.json"))["ids"].as_array().unwrap().len(), 6);
    let leftovers = fs::read_dir(tmp.path()).unwrap().filter(|e| {
        e.as_ref().unwrap().file_name().to_string_lossy().contains(".partial-")
    });
    assert_eq!(leftovers.count(), 0);
}

#[test]
fn split_rejects_a_year_with_one_month() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let sp = tmp.path().join("sp");
    // Thirteen monthly maps over a two-year span leave 2011 with January only.
    assert_eq!(run(&["synth", "--out", &s(&ds), "--synth.count", "13", "--synth.span_years", "2"]), 0);
    assert_eq!(run(&["split", "--out", &s(&sp), "--data.dataset", &s(&ds)]), 1);
    assert!(!sp.exists());
    let err = magsr::data::make_temporal_split(
        &magsr::data::available_months(&magsr::data::dataset::read_dataset(&ds).unwrap().1),
        0,
    )
    .unwrap_err();
    assert!(err.to_string().contains("2011"), "{err}");
}

#[test]
fn bad_config_key_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, _) = prepare(tmp.path(), "24");
    let out = tmp.path().join("tr");
    assert_ne!(run(&["train", "--out", &s(&out), "--data.dataset", &s(&ds), "--model.width", "9"]), 0);
    assert_ne!(run(&["train", "--out", &s(&out), "--data.dataset", &s(&ds), "--train.epochs", "many"]), 0);
    assert!(!out.exists());
}

#[test]
fn config_file_and_overrides_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small\nsynth.count = 5\nseed = 9\n").unwrap();
    let out = tmp.path().join("ds");
    assert_eq!(run(&["synth", "--config", &s(&cfg), "--out", &s(&out), "--seed", "2"]), 0);
    let record = json(out.join("run.json"));
    assert_eq!(record["config"]["synth.count"], 5);
    assert_eq!(record["config"]["seed"], 2);
}

#[test]
fn infer_with_one_sample_has_zero_epistemic() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, sp) = prepare(tmp.path(), "24");
    let tr = train_small(tmp.path(), &ds, &sp, "both");
    let out = tmp.path().join("in");
    let input = s(&ds.join("synth_0002.json"));
    let snap = s(&tr.join("model.snap"));
    let code = run(&[
        "infer", "--out", &s(&out), "--infer.snapshot", &snap, "--infer.input", &input, "--infer.samples", "1",
    ]);
    assert_eq!(code, 0);
    let bytes = fs::read(out.join("maps.fits")).unwrap();
    let hdus = magsr::io::fits::read_hdus(&bytes).unwrap();
    let epistemic = hdus.iter().find(|h| h.name() == Some("EPISTEMIC")).unwrap();
    assert!(epistemic.data.as_ref().unwrap().as_slice().iter().all(|&v| v == 0.0));
    assert!(out.join("uncertainty.png").exists());
}

#[test]
fn infer_reports_missing_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("in");
    let code = run(&["infer", "--out", &s(&out), "--infer.snapshot", "nope.snap", "--infer.input", "x.json"]);
    assert_eq!(code, 1);
    assert!(!out.exists());
}

#[test]
fn infer_needs_a_variance_head() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, sp) = prepare(tmp.path(), "24");
    let tr = train_small(tmp.path(), &ds, &sp, "baseline");
    let out = tmp.path().join("in");
    let code = run(&[
        "infer", "--out", &s(&out), "--infer.snapshot", &s(&tr.join("model.snap")), "--infer.input",
        &s(&ds.join("synth_0001.json")),
    ]);
    assert_eq!(code, 1);
    assert!(!out.exists());
}

#[test]
fn eval_writes_table_and_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, sp) = prepare(tmp.path(), "36");
    let out = tmp.path().join("ev");
    let code = run(&[
        "eval", "--out", &s(&out), "--data.dataset", &s(&ds), "--data.split", &s(&sp.join("split.json")),
        "--model.base_channels", "4", "--model.depth", "2", "--train.epochs", "1", "--eval.mc_samples", "3",
        "--eval.consistency_samples", "3",
    ]);
    assert_eq!(code, 0);
    let table = json(out.join("table1.json"));
    let rows = table["reports"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["test_mse"].as_f64().unwrap().is_finite()));

    let stats = json(out.join("conditional_stats.json"));
    let non_empty = stats["stats"]["bins"].as_array().unwrap().iter().filter(|b| b["count"].as_u64().unwrap() > 0).count();
    let csv = fs::read_to_string(out.join("conditional_stats.csv")).unwrap();
    let data_rows = csv.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(data_rows, non_empty);

    let consistency = json(out.join("consistency.json"));
    assert!(consistency["consistency"]["mean_ratio"].as_f64().unwrap() >= 0.0);
}

#[test]
fn keys_lists_registry() {
    assert_eq!(run(&["keys"]), 0);
}
