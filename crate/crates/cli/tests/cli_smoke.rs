//! Command-level behavior: exit codes, seed determinism, dry-run audit,
//! augmentation-aware distribution reports, and the training lock.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmdfr"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawning mmdfr")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_small(dir: &Path, seed: u64) {
    let out = run(bin().current_dir(dir).args([
        "synth",
        "--out",
        "data",
        "--subjects",
        "3",
        "--per-subject",
        "6",
        "--size",
        "64",
        "--pairs-per-fold",
        "2",
        "--folds",
        "2",
        "--seed",
        &seed.to_string(),
    ]));
    assert_ok(&out);
}

#[test]
fn usage_error_exits_2() {
    let out = run(bin().arg("no-such-command"));
    assert_eq!(out.status.code(), Some(2));
    let out = run(bin().args(["verify", "--bogus-flag"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_error_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().current_dir(dir.path()).args([
        "report-dist",
        "--manifest",
        "missing.tsv",
        "--out",
        "d.csv",
    ]));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), 1);
    std::fs::write(
        dir.path().join("cfg.txt"),
        "train.lr_initial = 1e12\ntrain.lr_floor = 1e12\ntrain.epochs = 40\n",
    )
    .unwrap();
    let out = run(bin().current_dir(dir.path()).args([
        "train-cnn",
        "--config",
        "cfg.txt",
        "--manifest",
        "data/manifest.tsv",
        "--images-root",
        "data",
        "--modality",
        "H1",
        "--spec",
        "tiny:16x12x8",
        "--out",
        "ckpts/H1.mmnn",
        "--seed",
        "1",
    ]));
    assert_eq!(
        out.status.code(),
        Some(4),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    synth_small(a.path(), 7);
    synth_small(b.path(), 7);
    synth_small(c.path(), 8);
    for rel in [
        "data/manifest.tsv",
        "data/pairs.txt",
        "data/s0000/i0000.pgm",
        "data/s0002/i0005.pgm",
    ] {
        let fa = std::fs::read(a.path().join(rel)).unwrap();
        let fb = std::fs::read(b.path().join(rel)).unwrap();
        assert_eq!(fa, fb, "{rel} differs across identical seeds");
    }
    let fa = std::fs::read(a.path().join("data/s0000/i0000.pgm")).unwrap();
    let fc = std::fs::read(c.path().join("data/s0000/i0000.pgm")).unwrap();
    assert_ne!(fa, fc, "different seeds should change the dataset");
}

#[test]
fn dry_run_declares_subset_dependencies_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().current_dir(dir.path()).args([
        "extract",
        "--manifest",
        "data/manifest.tsv",
        "--modalities",
        "H1,P2",
        "--nets-dir",
        "ckpts",
        "--out-dir",
        "feats",
        "--dry-run",
    ]));
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("read ckpts/H1.mmnn"));
    assert!(stdout.contains("read ckpts/P2.mmnn"));
    // Only the active subset's checkpoints are declared.
    assert!(!stdout.contains("H2.mmnn"));
    assert!(!stdout.contains("P1.mmnn"));
    assert!(stdout.contains("write feats/features_H1.mmfs"));
    // Nothing is created, not even the run log.
    assert!(!dir.path().join("feats").exists());
    assert!(!dir.path().join("mmdfr-runs.log").exists());
}

#[test]
fn report_dist_flip_doubles_every_count() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), 3);
    let base = run(bin().current_dir(dir.path()).args([
        "report-dist",
        "--manifest",
        "data/manifest.tsv",
        "--out",
        "base.csv",
    ]));
    assert_ok(&base);
    let flip = run(bin().current_dir(dir.path()).args([
        "report-dist",
        "--manifest",
        "data/manifest.tsv",
        "--out",
        "flip.csv",
        "--augment",
        "flip",
    ]));
    assert_ok(&flip);
    let parse = |name: &str| -> Vec<(String, usize)> {
        std::fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let (s, c) = l.split_once(',').unwrap();
                (s.to_string(), c.parse().unwrap())
            })
            .collect()
    };
    let base = parse("base.csv");
    let flip = parse("flip.csv");
    assert_eq!(base.len(), flip.len());
    for ((s1, c1), (s2, c2)) in base.iter().zip(&flip) {
        assert_eq!(s1, s2);
        assert_eq!(*c2, 2 * c1, "{s1}: {c1} -> {c2}");
    }
}

#[test]
fn training_lock_blocks_concurrent_runs() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), 5);
    std::fs::create_dir_all(dir.path().join("ckpts")).unwrap();
    std::fs::write(dir.path().join("ckpts/.mmdfr-lock"), "held").unwrap();
    let out = run(bin().current_dir(dir.path()).args([
        "train-cnn",
        "--manifest",
        "data/manifest.tsv",
        "--images-root",
        "data",
        "--modality",
        "H1",
        "--spec",
        "tiny:16x12x8",
        "--out",
        "ckpts/H1.mmnn",
    ]));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lock"));
}

#[test]
fn run_log_records_each_command() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), 9);
    let log = std::fs::read_to_string(dir.path().join("mmdfr-runs.log")).unwrap();
    let lines: Vec<&str> = log.trim().lines().collect();
    assert_eq!(lines.len(), 1);
    let entry: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(entry["command"], "synth");
    assert_eq!(entry["seed"], 9);
    assert!(entry["config_digest"].as_str().unwrap().len() == 16);
    assert!(entry["outputs"].as_array().unwrap().len() >= 2);
}
