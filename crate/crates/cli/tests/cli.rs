use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfa")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = dfa(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const SCORES: &str = "sample_id,video_id,label,score
a/0,a,0,0.1
a/1,a,0,0.3
b/0,b,0,0.6
c/0,c,1,0.7
c/1,c,1,0.9
d/0,d,1,0.4
";

fn write_scores(dir: &Path, text: &str) -> String {
    let p = dir.join("scores.csv");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn eval_scores_at_video_level() {
    let tmp = tempfile::tempdir().unwrap();
    let scores = write_scores(tmp.path(), SCORES);
    let out = tmp.path().join("eval");
    let v = ok_json(&["eval", "--scores", &scores, "--level", "video", "--out", out.to_str().unwrap()]);
    assert_eq!(v["level"], "video");
    assert_eq!(v["num_samples"], 4);
    assert_eq!(v["num_real"], 2);
    assert_eq!(v["num_fake"], 2);
    assert_eq!(v["auc"], 0.75);
    assert_eq!(v["accuracy"], 0.5);
    assert_eq!(v["precision"], 0.5);
    assert!((v["eer"].as_f64().unwrap() - 0.5).abs() < 1e-9);
    assert_eq!(read_json(&out.join("metrics.json")), v);

    let max = ok_json(&[
        "eval", "--scores", &scores, "--level", "video", "--aggregation", "max", "--threshold", "0.35",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(max["auc"], 0.75);
    assert_eq!(max["threshold_used"], 0.35);
    assert_eq!(max["accuracy"], 0.75);
}

#[test]
fn eval_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let scores = write_scores(tmp.path(), SCORES);
    let dirs = [tmp.path().join("r1"), tmp.path().join("r2")];
    for d in &dirs {
        ok_json(&["eval", "--scores", &scores, "--out", d.to_str().unwrap()]);
    }
    for f in ["metrics.json", "run_manifest.json", "resolved_config.toml", "seed.txt"] {
        assert_eq!(std::fs::read(dirs[0].join(f)).unwrap(), std::fs::read(dirs[1].join(f)).unwrap(), "{f}");
    }
    let manifest = read_json(&dirs[0].join("run_manifest.json"));
    assert_eq!(manifest["command"], "eval");
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert_eq!(files, ["metrics.json", "resolved_config.toml", "seed.txt"]);
}

#[test]
fn usage_errors_exit_2_with_json() {
    let out = dfa(&["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");
    let out = dfa(&["eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(dfa(&["--help"]).status.success());
    assert!(dfa(&["--version"]).status.success());
}

#[test]
fn single_class_table_is_undefined() {
    let tmp = tempfile::tempdir().unwrap();
    let scores = write_scores(tmp.path(), "sample_id,video_id,label,score\nx,x,1,0.2\ny,y,1,0.8\n");
    let out = dfa(&["eval", "--scores", &scores, "--out", tmp.path().join("e").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "undefined_metric");
}

#[test]
fn unknown_override_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dfa(&[
        "train", "--synthetic", "4", "--override", "no_such_key=1", "--out", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "config");
}

#[test]
fn train_writes_run_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("train");
    let o = out.to_str().unwrap();
    let v = ok_json(&["train", "--synthetic", "8", "--override", "max_steps=2", "--override", "seed=11", "--out", o]);
    assert_eq!(v["steps"], 2);
    for f in ["train_log.jsonl", "train_summary.json", "resolved_config.toml", "run_manifest.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(out.join("seed.txt")).unwrap().trim(), "11");
    for b in ["checkpoints/best", "checkpoints/last"] {
        for f in ["trainable.safetensors", "optimizer.safetensors", "config.toml", "bundle.json"] {
            assert!(out.join(b).join(f).is_file(), "{b}/{f}");
        }
    }
    let manifest = read_json(&out.join("run_manifest.json"));
    assert_eq!(manifest["seed"], 11);
    let listed: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert!(listed.contains(&"checkpoints/last/trainable.safetensors"));
    assert!(listed.contains(&"train_log.jsonl"));
    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("max_steps = 2"));
}

#[test]
fn ablate_reports_four_patterns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ablate");
    let v = ok_json(&["ablate", "--synthetic", "8", "--override", "max_steps=2", "--out", out.to_str().unwrap()]);
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let off: Vec<usize> = rows
        .iter()
        .map(|r| ["global_on", "local_on", "ifc_on"].iter().filter(|k| r[**k] == false).count())
        .collect();
    assert_eq!(off.iter().filter(|&&n| n == 1).count(), 3);
    assert_eq!(off.iter().filter(|&&n| n == 0).count(), 1);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r["auc"].as_f64().unwrap())));
    assert_eq!(read_json(&out.join("ablation.json")), v);
}

#[test]
fn raw_media_to_checkpoint_metrics_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    let common = [
        "--override", "train_fraction=0.5",
        "--override", "test_fraction=0.25",
        "--override", "frames_per_video=2",
        "--override", "store_size=64",
        "--override", "max_steps=2",
    ];
    let with = |head: &[&str], tail: &[&str]| -> Vec<String> {
        head.iter().chain(&common).chain(tail).map(|s| s.to_string()).collect()
    };
    let run = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok_json(&refs)
    };

    let synth = dfa(&["synth", "--videos-per-class", "4", "--frames", "3", "--out", &p("raw")]);
    assert!(synth.status.success());
    let summary = run(with(&["preprocess", "--root", &p("raw"), "--out", &p("store")], &[]));
    assert_eq!(summary["videos_written"], 8);
    assert_eq!(summary["frames_written"], 16);
    let dm = read_json(&tmp.path().join("store/dataset_manifest.json"));
    assert_eq!(dm["entries"].as_array().unwrap().len(), 8);

    let manifest = format!("manifest={}", p("store/manifest.json"));
    run(with(&["train", "--out", &p("train")], &["--override", &manifest]));
    let m = run(with(
        &["eval", "--checkpoint", &p("train/checkpoints/last"), "--split", "test", "--out", &p("eval")],
        &["--override", &manifest],
    ));
    assert_eq!(m["num_samples"], 4);
    let scores = std::fs::read_to_string(tmp.path().join("eval/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 5);

    let input = serde_json::json!({
        "methods": [
            { "method": "ours", "mixed_frame": { "file": "eval/metrics.json" } },
            { "method": "other", "mixed_frame": { "accuracy": 0.5, "precision": 0.5, "auc": 0.5, "eer": 0.5 } }
        ]
    });
    std::fs::write(tmp.path().join("report_input.json"), input.to_string()).unwrap();
    let r = ok_json(&["report", "--input", &p("report_input.json"), "--out", &p("report")]);
    assert_eq!(r["table_1"]["rows"].as_array().unwrap().len(), 2);
    assert_eq!(r["table_1"]["rows"][0][3], m["auc"]);
}
