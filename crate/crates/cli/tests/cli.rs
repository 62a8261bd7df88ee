use std::path::Path;
use std::process::Command;

use branch_distill::Error;
use branch_distill_cli::{ablate_header, cmd_ablate, cmd_eval, cmd_train, exit_code, RunManifest, Settings, RUNGS};
use tempfile::tempdir;

const SYNTH: &str = "synthetic:1x8x8:24:0.5:8";

fn tiny(dir: &Path, seed: u64) -> Settings {
    let mut s = Settings::parse(&format!(
        "dataset = {SYNTH}\nclasses = 4\nepochs = 2\nbatch_size = 32\nlr0 = 0.05\nseed = {seed}\ncheckpoint_dir = {}\n",
        dir.display()
    ))
    .unwrap();
    s.set("arch", "tiny-resnet").unwrap();
    s
}

fn names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn empty_config_needs_a_seed() {
    let s = Settings::parse("").unwrap();
    match s.train_config() {
        Err(Error::Config(msg)) => assert!(msg.contains("seed"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn out_of_range_alpha_is_a_config_error() {
    let s = Settings::parse("seed = 1\nalpha = 1.5").unwrap();
    let e = s.train_config().unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert_eq!(exit_code(&e), 2);
}

#[test]
fn unknown_keys_and_malformed_lines_are_rejected() {
    assert!(matches!(Settings::parse("sede = 1"), Err(Error::Config(_))));
    assert!(matches!(Settings::parse("seed 1"), Err(Error::Config(_))));
    let mut s = Settings::default();
    assert!(matches!(s.apply_flags(&["--nope".into(), "1".into()]), Err(Error::Config(_))));
    assert!(matches!(s.apply_flags(&["--seed".into()]), Err(Error::Config(_))));
}

#[test]
fn flags_override_the_file() {
    let mut s = Settings::parse("# comment\nseed = 1\nlr0 = 0.2   # trailing\n\nbatch_size = 16").unwrap();
    s.apply_flags(&["--lr0".into(), "0.01".into(), "--batch-size=8".into()]).unwrap();
    assert_eq!(s.get("lr0"), Some("0.01"));
    assert_eq!(s.get("batch_size"), Some("8"));
    assert_eq!(s.get("seed"), Some("1"));
    assert_eq!(s.get("momentum"), Some("0.9"));
    let cfg = s.train_config().unwrap();
    assert_eq!(cfg.lr0, 0.01);
    assert_eq!(cfg.batch_size, 8);
    assert_eq!(cfg.arch.classes, 100);
}

#[test]
fn train_writes_exactly_the_run_artifacts() {
    let dir = tempdir().unwrap();
    let s = tiny(dir.path(), 3);
    let mut out = Vec::new();
    let report = cmd_train(&s, &mut out).unwrap();
    assert_eq!(report.best.len(), 3);
    assert_eq!(
        names(dir.path()),
        ["best_c1.ckpt", "best_c2.ckpt", "best_c3.ckpt", "final.ckpt", "manifest.json", "metrics.csv"]
    );
    let m = RunManifest::read(dir.path()).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.config.get("seed").map(String::as_str), Some("3"));
    assert_eq!(m.dataset_checksum.len(), 64);
    assert!(m.ended_unix.unwrap() >= m.started_unix);
    assert_eq!(m.outputs.len(), 5);
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("ensemble best accuracy"), "{text}");

    let again = Settings::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(again.resolved(), s.resolved());
}

#[test]
fn same_settings_give_identical_artifacts() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    cmd_train(&tiny(a.path(), 5), &mut std::io::sink()).unwrap();
    cmd_train(&tiny(b.path(), 5), &mut std::io::sink()).unwrap();
    for f in ["metrics.csv", "final.ckpt", "best_c3.ckpt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_reports_every_classifier_deterministically() {
    let dir = tempdir().unwrap();
    let s = tiny(dir.path(), 4);
    cmd_train(&s, &mut std::io::sink()).unwrap();
    let ckpt = dir.path().join("final.ckpt");
    let mut out = Vec::new();
    let a = cmd_eval(&s, &ckpt, &mut out).unwrap();
    let b = cmd_eval(&s, &ckpt, &mut std::io::sink()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.accuracies.len(), 3);
    assert_eq!(a.sizes.len(), 3);
    assert!(a.sizes.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
    assert!(a.train_params > a.sizes[2].0);
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().next().unwrap().starts_with("classifier 1 accuracy "));
}

#[test]
fn ablate_runs_every_rung_for_every_seed() {
    let dir = tempdir().unwrap();
    let mut s = tiny(dir.path(), 1);
    s.set("epochs", "1").unwrap();
    s.set("seeds", "1,2").unwrap();
    let rows = cmd_ablate(&s, &mut std::io::sink()).unwrap();
    assert_eq!(rows.len(), 8);
    let csv = std::fs::read_to_string(dir.path().join("ablate.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ablate_header(3));
    assert_eq!(lines.len(), 9);
    for (i, line) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), ablate_header(3).split(',').count());
        assert_eq!(cells[0], RUNGS[i / 2]);
        assert_eq!(cells[1], ["1", "2"][i % 2]);
        assert_eq!(*cells.last().unwrap(), "true");
    }
    for rung in RUNGS {
        let m = RunManifest::read(&dir.path().join(rung).join("seed2")).unwrap();
        assert_eq!(m.command, "ablate");
    }
    let ce = RunManifest::read(&dir.path().join("ce/seed1")).unwrap();
    for key in ["alpha", "beta", "gamma"] {
        assert_eq!(ce.config[key], "0");
    }
    let full = RunManifest::read(&dir.path().join("ce+kl+l2+w/seed1")).unwrap();
    assert_eq!(full.config["gamma"], "0.1");
}

#[test]
fn missing_teacher_is_a_config_error() {
    let dir = tempdir().unwrap();
    let e = branch_distill_cli::cmd_distill(&tiny(dir.path(), 1), &mut std::io::sink()).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_branch-distill"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempdir().unwrap();
    let d = dir.path().display().to_string();
    let status = |args: &[&str]| binary().args(args).env("RUST_LOG", "off").output().unwrap().status.code();
    assert_eq!(status(&["train", "--checkpoint-dir", &d]), Some(2));
    assert_eq!(status(&["train", "--seed", "1", "--alpha", "1.5", "--checkpoint-dir", &d]), Some(2));
    assert_eq!(status(&["train", "--seed", "1", "--bogus", "3"]), Some(2));
    let missing = dir.path().join("none.ckpt").display().to_string();
    assert_eq!(status(&["eval", "--checkpoint", &missing, "--seed", "1", "--dataset", SYNTH, "--classes", "4"]), Some(3));
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, format!("dataset={SYNTH}\nclasses=4\nepochs=1\nbatch_size=32\nseed=2\ncheckpoint_dir={d}/run\n")).unwrap();
    let cfg = cfg.display().to_string();
    assert_eq!(status(&["train", "--config", &cfg]), Some(0));
    let out = binary()
        .args(["eval", "--checkpoint", &format!("{d}/run/final.ckpt"), "--config", &cfg])
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().contains("ensemble accuracy"));
}
