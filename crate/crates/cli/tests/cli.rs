//! Runs the `gmt` binary end to end.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmt_cli::trackfile::{read_records, HEADER};
use gmt_cli::weights::{encode, read_weights, write_weights};
use gmt_cli::RunConfig;
use gmt_core::assoc::train::{label_step, window_batch, TrainingScene};
use gmt_core::assoc::{batch_loss, GmtParams};
use gmt_core::features::FeatureDims;

const SEEDS: &str = "[scenario]\nseed = 1\n[scenario.embedding]\nseed = 2\n[scenario.noise]\nseed = 3\n[model]\nseed = 4\n";

fn gmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmt"))
        .args(args)
        .env_remove("MTMC_SEED_OVERRIDE")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// A short scene with the given extra TOML appended.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{SEEDS}[train]\nseed = 5\niterations = 3\nscenes = 1\n{extra}")).unwrap();
    p
}

fn report_value(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
        .to_string()
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[tracker]\nwindw = 3\n");
    let o = gmt(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("windw"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let gone = dir.path().join("nope.csv");
    let o = gmt(&["evaluate", "--gt", s(&gone), "--pred", s(&gone)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&gone)), "{}", stderr(&o));

    let cfg = dir.path().join("absent.toml");
    let o = gmt(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("w.bin"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&cfg)), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(gmt(&[]).status.code(), Some(1));
    assert_eq!(gmt(&["track", "--config"]).status.code(), Some(1));
    assert_eq!(gmt(&["--help"]).status.code(), Some(0));
}

#[test]
fn prediction_equal_to_ground_truth_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert!(gmt(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]).status.success());
    let gt = dir.path().join("gt.csv");
    let o = gmt(&["evaluate", "--gt", s(&gt), "--pred", s(&gt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = stdout(&o);
    for key in ["cvma", "cvidp", "cvidr", "cvidf1"] {
        assert_eq!(report_value(&r, key), "1.000000");
    }
    assert_eq!(report_value(&r, "mismatches"), "0");
}

#[test]
fn empty_detection_file_gives_empty_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let w = dir.path().join("w.bin");
    write_weights(&w, &GmtParams::init(&FeatureDims::desk(), 8, 1).unwrap()).unwrap();
    let dets = dir.path().join("dets.csv");
    fs::write(&dets, format!("{HEADER}\n")).unwrap();
    let out = dir.path().join("pred.csv");
    let o = gmt(&["track", "--config", s(&cfg), "--weights", s(&w), "--detections", s(&dets), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap(), format!("{HEADER}\n"));
}

#[test]
fn weights_mismatching_the_config_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert!(gmt(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]).status.success());
    let w = dir.path().join("w.bin");
    write_weights(&w, &GmtParams::init(&FeatureDims::desk(), 4, 1).unwrap()).unwrap();
    let dets = dir.path().join("detections.csv");
    let out = dir.path().join("pred.csv");
    let o = gmt(&["track", "--config", s(&cfg), "--weights", s(&w), "--detections", s(&dets), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("H=4"), "{}", stderr(&o));
}

#[test]
fn trained_weights_round_trip_and_beat_random_init_on_held_out_windows() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(repo_config("easy.toml")).unwrap().replace("iterations = 300", "iterations = 150");
    let cfg_path = dir.path().join("easy.toml");
    fs::write(&cfg_path, &text).unwrap();
    let w = dir.path().join("w.bin");
    let o = gmt(&["train", "--config", s(&cfg_path), "--out", s(&w)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = fs::read_to_string(dir.path().join("w.bin.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 151);

    let bytes = fs::read(&w).unwrap();
    let trained = read_weights(&w).unwrap();
    assert_eq!(encode(&trained), bytes);

    // held-out: the tracked scene, which training never sees
    let cfg = RunConfig::parse(&text, None).unwrap();
    let sc = cfg.scenario().unwrap();
    let scene = TrainingScene { dims: sc.gt.dims, gt: sc.gt, steps: sc.steps };
    let labels: Vec<_> = scene.steps.iter().map(|st| label_step(st, &scene.gt)).collect();
    let init = GmtParams::init(&cfg.feature_dims(), cfg.model.heads, cfg.model.seed.unwrap()).unwrap();
    let (mut before, mut after) = (0.0, 0.0);
    for start in (0..88).step_by(11) {
        let b = window_batch(&scene, &labels, start, 12, 200, 32).unwrap();
        before += batch_loss(&b, &init).unwrap().total;
        after += batch_loss(&b, &trained).unwrap().total;
    }
    assert!(after < 0.5 * before, "held-out loss {after} vs {before} at init");
}

/// Ids given to ground-truth identity 1 before and after its occlusion.
fn ids_of_occluded(gt: &Path, pred: &Path) -> (BTreeSet<u64>, BTreeSet<u64>) {
    let g = read_records(gt).unwrap();
    let p = read_records(pred).unwrap();
    let (mut before, mut after) = (BTreeSet::new(), BTreeSet::new());
    for r in g.iter().filter(|r| r.id == Some(1)) {
        let hit = p.iter().find(|q| q.camera == r.camera && q.frame == r.frame && q.bbox == r.bbox);
        if let Some(q) = hit {
            if r.frame <= 30 {
                before.insert(q.id.unwrap());
            } else {
                after.insert(q.id.unwrap());
            }
        }
    }
    (before, after)
}

#[test]
fn memory_toggle_changes_the_returning_id() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(repo_config("occlusion.toml")).unwrap();
    let w = dir.path().join("matcher.bin");
    write_weights(&w, &GmtParams::appearance_matcher(&FeatureDims::desk(), 8, 0.5).unwrap()).unwrap();
    let mut seen = Vec::new();
    for enabled in [true, false] {
        let cfg = dir.path().join(format!("occ_{enabled}.toml"));
        fs::write(&cfg, base.replace("memory_enabled = true", &format!("memory_enabled = {enabled}"))).unwrap();
        assert!(gmt(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]).status.success());
        let out = dir.path().join(format!("pred_{enabled}.csv"));
        let dets = dir.path().join("detections.csv");
        let o = gmt(&["track", "--config", s(&cfg), "--weights", s(&w), "--detections", s(&dets), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let (before, after) = ids_of_occluded(&dir.path().join("gt.csv"), &out);
        assert_eq!((before.len(), after.len()), (1, 1), "{before:?} {after:?}");
        seen.push((before, after));
    }
    assert_eq!(seen[0].0, seen[0].1);
    assert_ne!(seen[1].0, seen[1].1);
}

#[test]
fn seed_override_controls_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = Command::new(env!("CARGO_BIN_EXE_gmt"))
            .args(["simulate", "--config", s(&cfg), "--out", s(&out)])
            .env("MTMC_SEED_OVERRIDE", seed)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("gt.csv")).unwrap()
    };
    assert_eq!(run("9", "a"), run("9", "b"));
    assert_ne!(run("9", "a"), run("10", "c"));
}

#[test]
fn selftest_passes_and_catches_a_gradient_fault() {
    let o = gmt(&["selftest"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{out}");

    let o = gmt(&["selftest", "--inject-gradient-fault"]);
    assert_eq!(o.status.code(), Some(3));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("FAIL gradients")), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{out}");
}
