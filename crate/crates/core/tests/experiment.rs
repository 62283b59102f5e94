use std::fs;
use std::path::Path;

use xreplay::experiment::*;

fn config(seed: u64, rrr: bool, archive: bool) -> String {
    format!(
        r#"
schema_version = 1
seed = {seed}
output_dir = "unused"
archive_checkpoints = {archive}
buffer_capacity = 6

[scenario]
total_classes = 4
num_tasks = 2
ways_per_task = 2
image_size = [16, 16]
source = "synthetic"

[scenario.synthetic]
train_per_class = 8
test_per_class = 5

[train]
strategy = "er"
rrr_enabled = {rrr}
epochs = 2
batch_size = 8

[saliency]
method = "grad_cam"
"#
    )
}

fn run_into(dir: &Path, text: &str) -> RunSummary {
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    run_experiment(&cfg, text, dir).unwrap()
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let s = run_into(&dir, &config(1, true, true));
    for f in [
        "config.toml",
        "R.csv",
        "summary.json",
        "predictions.csv",
        "train_log.jsonl",
        "buffer.bin",
        "model_final.ckpt",
        "manifest.json",
        "checkpoints/task_1.ckpt",
        "checkpoints/task_2.ckpt",
    ] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let r = fs::read_to_string(dir.join("R.csv")).unwrap();
    let rows: Vec<&str> = r.lines().collect();
    assert_eq!(rows[0], "k,i,accuracy,pg_hit_rate");
    assert_eq!(rows.len(), 4);
    assert_eq!(s.accuracy.len(), 2);
    assert!(s.pg_acc.is_some());
    assert_eq!(load_summary(&dir).unwrap(), s);
    let log = fs::read_to_string(dir.join("train_log.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["l_task"].as_f64().unwrap().is_finite());
    }
    // 16 training samples per task, batch 8, 2 epochs
    assert_eq!(log.lines().count(), 2 * 2 * 2);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["tasks"], 2);
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let text = config(5, true, false);
    run_into(&tmp.path().join("a"), &text);
    run_into(&tmp.path().join("b"), &text);
    for f in ["R.csv", "buffer.bin", "model_final.ckpt", "predictions.csv", "summary.json", "manifest.json"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn visualize_agrees_with_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run_into(&dir, &config(2, false, true));
    let sample = SampleRef { task: 1, index: 3 };
    let (png, json) = visualize(&dir, sample, &[1, 2]).unwrap();
    assert!(png.is_file());
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    let preds = fs::read_to_string(dir.join("predictions.csv")).unwrap();
    for panel in doc["panels"].as_array().unwrap() {
        let k = panel["checkpoint"].as_u64().unwrap();
        let row = preds
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|c| c[0] == k.to_string() && c[1] == "1" && c[2] == "3")
            .expect("prediction row");
        assert_eq!(row[4], panel["predicted"].as_u64().unwrap().to_string());
        assert_eq!(row[5] == "1", panel["correct"].as_bool().unwrap());
        let note = panel["annotation"].as_str().unwrap();
        assert_eq!(note == "correct", panel["correct"].as_bool().unwrap());
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["visualizations"].as_array().unwrap().len(), 2);
    let img = image::open(&png).unwrap();
    assert!(img.width() > img.height());
}

#[test]
fn visualize_needs_archived_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run_into(&dir, &config(3, false, false));
    let err = visualize(&dir, SampleRef { task: 1, index: 0 }, &[1]).unwrap_err();
    assert!(err.to_string().contains("archive_checkpoints"), "{err}");
}

#[test]
fn compare_single_runs_and_seed_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let er = tmp.path().join("er");
    let rrr = tmp.path().join("er_rrr");
    for seed in 0..2 {
        run_into(&er.join(format!("seed{seed}")), &config(seed, false, false));
        run_into(&rrr.join(format!("seed{seed}")), &config(seed, true, false));
    }
    let out = tmp.path().join("cmp");
    let cmp = compare(&[er.clone(), rrr.clone()], &out).unwrap();
    assert_eq!(cmp.tasks, 2);
    assert_eq!(cmp.arms[0].runs.len(), 2);
    assert!(cmp.arms[0].acc_std.is_some());
    for f in ["comparison.csv", "comparison.json", "comparison.png"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    for k in 0..2 {
        let d = cmp.arms[1].curve_mean[k] - cmp.arms[0].curve_mean[k];
        assert_eq!(cmp.diffs[0][k], d);
    }
    // a single run directory is an arm of one run with no std
    let single = compare(&[er.join("seed0"), rrr.join("seed0")], &tmp.path().join("cmp1")).unwrap();
    assert_eq!(single.arms[0].acc_std, None);
    assert!(compare(&[er], &out).is_err());
}
