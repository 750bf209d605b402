use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn signspot(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signspot"))
        .args(args)
        .arg("--log-level")
        .arg("warn")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = signspot(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A synthetic corpus and a briefly trained model shared by the tests.
fn workspace() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        std::fs::write(
            dir.join("synth.json"),
            r#"{"vocab_size": 8, "feature_dim": 12, "latent_dim": 6, "train_videos": 20, "test_clips_per_word": 2, "held_out_words": ["tree"]}"#,
        )
        .unwrap();
        std::fs::write(dir.join("train.json"), r#"{"epochs": 3, "lr_decay_epochs": [], "batch_size": 8, "lr": 0.05}"#).unwrap();
        ok(&["synth", "--config", "synth.json", "--out", "corpus"], &dir);
        ok(
            &["train", "--manifest", "corpus/manifest.json", "--config", "train.json", "--out", "model.mlpw", "--history", "history.json", "--dump-bags", "bags"],
            &dir,
        );
        dir
    })
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(signspot(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(signspot(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(signspot(&["train", "--out", "m.mlpw"], dir.path()).status.code(), Some(1));
}

#[test]
fn missing_manifest_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = signspot(&["train", "--manifest", "nowhere/manifest.json", "--out", "m.mlpw"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/manifest.json"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = workspace();
    std::fs::write(dir.join("bad.json"), r#"{"epochs": 2, "momentum": 0.9}"#).unwrap();
    let out = signspot(&["train", "--manifest", "corpus/manifest.json", "--config", "bad.json", "--out", "x.mlpw"], dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}

#[test]
fn training_writes_history_and_bags() {
    let dir = workspace();
    let history: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("history.json")).unwrap()).unwrap();
    assert_eq!(history["epochs"].as_array().unwrap().len(), 3);
    let dumps: Vec<_> = std::fs::read_dir(dir.join("bags")).unwrap().collect();
    assert!(!dumps.is_empty());
    let first = dumps[0].as_ref().unwrap().path();
    let line = std::fs::read_to_string(first).unwrap();
    let rec: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert!(rec["positives"].is_array() && rec["negatives"].is_array());
}

#[test]
fn spot_and_traces() {
    let dir = workspace();
    let common = ["--manifest", "corpus/test_manifest.json", "--params", "model.mlpw"];
    let mut args = vec!["spot", "--word", "friend"];
    args.extend(common);
    let out = ok(&args, dir);
    let lines: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    for l in &lines {
        assert_eq!(l["word"], "friend");
        assert!(l["score"].as_f64().unwrap().abs() <= 1.0);
    }
    let video = lines[0]["video_id"].as_str().unwrap().to_string();
    let mut args = vec!["traces", "--word", "friend", "--video", &video, "--stride", "4"];
    args.extend(common);
    let csv = ok(&args, dir);
    assert!(csv.starts_with("frame,friend_v0"));

    let mut args = vec!["spot", "--word", "zebra"];
    args.extend(common);
    assert_eq!(signspot(&args, dir).status.code(), Some(2));
}

#[test]
fn mine_stats_and_eval() {
    let dir = workspace();
    ok(&["mine", "--manifest", "corpus/manifest.json", "--params", "model.mlpw", "--threshold", "0.3", "--out", "mined.jsonl"], dir);
    let mined = std::fs::read_to_string(dir.join("mined.jsonl")).unwrap();
    for l in mined.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert!(v["score"].as_f64().unwrap() >= 0.3);
        assert_eq!(v["source"], "dictionary");
    }
    let stats: Value = serde_json::from_str(&ok(
        &["stats", "--manifest", "corpus/manifest.json", "--mined", "mined.jsonl", "--thresholds", "0.3,0.9"],
        dir,
    ))
    .unwrap();
    let y = stats["yield_statistics"].as_array().unwrap();
    assert_eq!(y[0]["instance_count"].as_u64().unwrap() as usize, mined.lines().count());
    assert!(y[1]["instance_count"].as_u64() <= y[0]["instance_count"].as_u64());

    ok(
        &["eval", "--manifest", "corpus/test_manifest.json", "--params", "model.mlpw", "--protocol", "retrieval", "--split", "corpus/split.json", "--subset", "seen", "--out", "seen.json"],
        dir,
    );
    let m: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("seen.json")).unwrap()).unwrap();
    assert!(m["r_at_5"].as_f64().is_some());
    assert!(m["per_class"].get("tree").is_none());
}

#[test]
fn fauxamis_and_trim() {
    let dir = workspace();
    ok(
        &["fauxamis", "--params", "model.mlpw", "--dict-a", "corpus/manifest.json", "--dict-b", "corpus/manifest.json", "-k", "2", "--out", "pairs.jsonl"],
        dir,
    );
    let pairs: Vec<Value> =
        std::fs::read_to_string(dir.join("pairs.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for p in pairs.iter().filter(|p| p["rank"] == 1) {
        assert_eq!(p["a_id"], p["b_id"]);
    }

    let frames: Vec<Value> = (0..30)
        .map(|t| {
            let x = if t < 10 { 0.0 } else if t < 20 { (t - 10) as f64 * 0.2 } else { 2.0 };
            serde_json::json!({"left": [x, 0.0], "right": null})
        })
        .collect();
    std::fs::write(dir.join("kp.json"), serde_json::to_string(&frames).unwrap()).unwrap();
    let out: Value = serde_json::from_str(&ok(&["trim", "--keypoints", "kp.json", "--threshold", "0.1"], dir)).unwrap();
    let (s, e) = (out["start_frame"].as_u64().unwrap(), out["end_frame"].as_u64().unwrap());
    assert!(s.abs_diff(10) <= 2 && e.abs_diff(19) <= 2, "({s}, {e})");
}

#[test]
fn stats_skips_bad_records() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.json"), r#"{"vocab_size": 6, "feature_dim": 8, "latent_dim": 4, "train_videos": 3}"#).unwrap();
    ok(&["synth", "--config", "s.json", "--out", "c"], dir.path());
    let feats: Vec<_> = std::fs::read_dir(dir.path().join("c/feats")).unwrap().map(|e| e.unwrap().path()).collect();
    let victim = feats.iter().find(|p| p.file_name().unwrap().to_string_lossy().starts_with("train")).unwrap();
    std::fs::write(victim, b"FEAT").unwrap();
    let stats: Value = serde_json::from_str(&ok(&["stats", "--manifest", "c/manifest.json"], dir.path())).unwrap();
    assert_eq!(stats["skipped_records"], 1);
    assert_eq!(stats["continuous"], 2);
}
