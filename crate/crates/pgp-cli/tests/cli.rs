//! End-to-end tests driving the `pgp` binary through temp directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pgp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("pgp binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

/// A config small enough that train/eval/ablate finish in seconds.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "world": {
    "classes": 5,
    "diagnoses": 4,
    "hard_groups": [[0, 1]],
    "size_table": [1.0, 1.0, 2.0, 0.7, 1.5],
    "feature_dim": 12,
    "noise_std": 0.1,
    "occlusion_rate": 0.3,
    "seed": 11
  },
  "data": {"prescriptions": 40, "train_scenes": 20, "test_scenes": 8},
  "model": {"hidden_dim": 10, "embed_dim": 6, "channels": 4},
  "training": {"steps": 15, "batch_size": 4, "learning_rate": 0.005, "neighbor_k": 1}
}
"#,
    )
    .expect("config written");
    path
}

fn artifact_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut map = BTreeMap::new();
    for entry in fs::read_dir(dir.join("artifacts")).expect("artifacts dir exists") {
        let entry = entry.expect("dir entry");
        map.insert(entry.path(), fs::read(entry.path()).expect("artifact readable"));
    }
    map
}

#[test]
fn full_pipeline_succeeds_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dir = dir.path();
    write_tiny_config(dir);
    let run_all = || {
        assert_ok(&pgp(dir, &["--config", "config.json", "gen-world"]), "gen-world");
        assert_ok(&pgp(dir, &["--config", "config.json", "build-graphs"]), "build-graphs");
        assert_ok(&pgp(dir, &["--config", "config.json", "train"]), "train");
        assert_ok(&pgp(dir, &["--config", "config.json", "eval"]), "eval");
        assert_ok(
            &pgp(
                dir,
                &[
                    "--config",
                    "config.json",
                    "ablate",
                    "--mode",
                    "edge_remove",
                    "--fraction",
                    "0.5",
                    "--seed",
                    "3",
                ],
            ),
            "ablate",
        );
    };
    run_all();
    for name in [
        "corpus.jsonl",
        "train_annotations.jsonl",
        "train_scenes.jsonl",
        "test_annotations.jsonl",
        "test_scenes.jsonl",
        "co_graph.json",
        "size_graph.json",
        "model.ckpt",
        "train_log.csv",
        "eval_report.json",
        "eval_report.csv",
        "ablate_report.json",
    ] {
        assert!(dir.join("artifacts").join(name).is_file(), "{name} should exist");
    }
    let first = artifact_bytes(dir);
    run_all();
    let second = artifact_bytes(dir);
    assert_eq!(first, second, "rerunning every command must reproduce identical bytes");

    let report = pgp(dir, &["--config", "config.json", "report"]);
    assert_ok(&report, "report");
    let text = stdout(&report);
    assert!(text.contains("mAP"), "report digest mentions mAP: {text}");
    assert!(text.contains("edge_remove"), "report digest covers the ablation: {text}");
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dir = dir.path();
    write_tiny_config(dir);
    let out = pgp(dir, &["--config", "config.json", "build-graphs"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("missing input file"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dir = dir.path();
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{"world": {"classes": 4, "diagnoses": 2, "hard_groups": [],
            "size_table": [1.0, 1.0, 2.0, 2.0], "feature_dim": 8,
            "noise_std": 0.1, "occlusion_rate": 0.2, "seed": 3},
            "trainingg": {"steps": 10}}"#,
    )
    .expect("config written");
    let out = pgp(dir, &["--config", "config.json", "gen-world"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("trainingg"), "stderr names the typo: {}", stderr(&out));
}

#[test]
fn invalid_ablation_fraction_is_a_usage_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dir = dir.path();
    write_tiny_config(dir);
    let out = pgp(
        dir,
        &["--config", "config.json", "ablate", "--mode", "edge_remove", "--fraction", "1.5"],
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn visual_only_training_needs_no_graphs() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dir = dir.path();
    write_tiny_config(dir);
    assert_ok(&pgp(dir, &["--config", "config.json", "gen-world"]), "gen-world");
    let out = pgp(dir, &["--config", "config.json", "train", "--visual-only", "--steps", "5"]);
    assert_ok(&out, "visual-only train");
    assert!(stdout(&out).contains("visual-only"), "stdout: {}", stdout(&out));
    // Evaluating that checkpoint needs a config that matches its variant.
    let visual = fs::read_to_string(dir.join("config.json"))
        .expect("config readable")
        .replace("\"model\": {", "\"model\": {\"relational\": false, ");
    fs::write(dir.join("visual.json"), visual).expect("config written");
    assert_ok(&pgp(dir, &["--config", "visual.json", "eval"]), "eval of visual-only checkpoint");
    let mismatched = pgp(dir, &["--config", "config.json", "eval"]);
    assert_eq!(
        mismatched.status.code(),
        Some(2),
        "a relational config must reject the visual-only checkpoint"
    );
}

#[test]
fn incompatible_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dir = dir.path();
    write_tiny_config(dir);
    assert_ok(&pgp(dir, &["--config", "config.json", "gen-world"]), "gen-world");
    assert_ok(&pgp(dir, &["--config", "config.json", "build-graphs"]), "build-graphs");
    assert_ok(&pgp(dir, &["--config", "config.json", "train", "--steps", "5"]), "train");
    // Same world, different embedding width: the checkpoint no longer fits.
    let other = fs::read_to_string(dir.join("config.json"))
        .expect("config readable")
        .replace("\"embed_dim\": 6", "\"embed_dim\": 8");
    fs::write(dir.join("other.json"), other).expect("config written");
    let out = pgp(dir, &["--config", "other.json", "eval"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn gen_world_seed_override_changes_the_corpus() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dir = dir.path();
    write_tiny_config(dir);
    assert_ok(&pgp(dir, &["--config", "config.json", "gen-world"]), "gen-world");
    let baseline = fs::read(dir.join("artifacts/corpus.jsonl")).expect("corpus exists");
    assert_ok(
        &pgp(dir, &["--config", "config.json", "gen-world", "--seed", "12"]),
        "gen-world with seed override",
    );
    let reseeded = fs::read(dir.join("artifacts/corpus.jsonl")).expect("corpus exists");
    assert_ne!(baseline, reseeded, "a different world seed must change the corpus");
}

#[test]
fn report_without_artifacts_is_a_usage_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dir = dir.path();
    write_tiny_config(dir);
    let out = pgp(dir, &["--config", "config.json", "report"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("no artifacts"), "stderr: {}", stderr(&out));
}

#[test]
fn help_and_version_exit_cleanly() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dir = dir.path();
    for flag in ["--help", "--version"] {
        let out = pgp(dir, &[flag]);
        assert_eq!(out.status.code(), Some(0), "{flag} should exit 0");
    }
    let out = pgp(dir, &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2), "unknown subcommands are usage errors");
}
