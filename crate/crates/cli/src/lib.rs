//! Experiment commands: train, distill, eval and the loss-ablation ladder.

pub mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use branch_distill::data::Dataset;
use branch_distill::nn::{count_params_flops, BranchedModel};
use branch_distill::train::{self, load_model, load_splits, run_loop, RunReport, TrainConfig, Trainer};
use branch_distill::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::Settings;

pub const MANIFEST: &str = "manifest.json";

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Parse { .. } => 3,
        Error::NumericFault { .. } => 4,
        Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => 2,
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: std::collections::BTreeMap<String, String>,
    pub code_version: String,
    /// SHA-256 over the training and evaluation splits.
    pub dataset_checksum: String,
    pub started_unix: f64,
    pub ended_unix: Option<f64>,
    pub outputs: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

pub fn dataset_checksum(train: &Dataset, eval: &Dataset) -> String {
    let mut h = Sha256::new();
    train.hash_into(&mut |b| h.update(b));
    eval.hash_into(&mut |b| h.update(b));
    format!("{:x}", h.finalize())
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(io(&path))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(io(&path))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path, offset: 0, msg: e.to_string() })
    }
}

fn run_dir(cfg: &TrainConfig) -> Result<PathBuf> {
    cfg.checkpoint_dir.clone().ok_or_else(|| Error::Config("key `checkpoint_dir` is required".into()))
}

/// Runs one training job in its run directory, bracketed by the manifest.
fn managed_run(command: &str, settings: &Settings, cfg: &TrainConfig, teacher: Option<&Path>) -> Result<RunReport> {
    let dir = run_dir(cfg)?;
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let teacher_model = teacher.map(load_model).transpose()?;
    let (train, eval) = load_splits(cfg)?;
    let mut manifest = RunManifest {
        command: command.to_string(),
        config: settings.resolved(),
        code_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        dataset_checksum: dataset_checksum(&train, &eval),
        started_unix: now(),
        ended_unix: None,
        outputs: Vec::new(),
    };
    manifest.write(&dir)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    if let Some(t) = teacher_model {
        trainer = trainer.with_teacher(t)?;
    }
    let report = run_loop(&mut trainer, &train, &eval)?;
    manifest.ended_unix = Some(now());
    manifest.outputs = std::iter::once(dir.join("metrics.csv"))
        .chain(std::iter::once(dir.join("final.ckpt")))
        .chain((1..=report.best.len()).map(|k| dir.join(format!("best_c{k}.ckpt"))))
        .collect();
    manifest.write(&dir)?;
    Ok(report)
}

fn print_report(out: &mut dyn std::io::Write, report: &RunReport) -> std::io::Result<()> {
    for (k, (a, e)) in report.best.iter().zip(&report.best_epoch).enumerate() {
        writeln!(out, "classifier {} best accuracy {a:.6} at epoch {e}", k + 1)?;
    }
    writeln!(out, "ensemble best accuracy {:.6}", report.best_ensemble)
}

/// `train`: self-distillation from scratch.
pub fn cmd_train(settings: &Settings, out: &mut dyn std::io::Write) -> Result<RunReport> {
    let cfg = settings.train_config()?;
    let report = managed_run("train", settings, &cfg, None)?;
    print_report(out, &report).map_err(io(Path::new("<stdout>")))?;
    Ok(report)
}

/// `distill`: a fresh student against the frozen teacher at `teacher`.
pub fn cmd_distill(settings: &Settings, out: &mut dyn std::io::Write) -> Result<RunReport> {
    let cfg = settings.train_config()?;
    let teacher = settings.teacher().ok_or_else(|| Error::Config("distill needs key `teacher` (a checkpoint path)".into()))?;
    let report = managed_run("distill", settings, &cfg, Some(&teacher))?;
    print_report(out, &report).map_err(io(Path::new("<stdout>")))?;
    Ok(report)
}

/// Accuracy and size of every classifier in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub accuracies: Vec<f64>,
    pub ensemble: f64,
    /// `(params, flops)` of each extracted classifier.
    pub sizes: Vec<(usize, usize)>,
    pub train_params: usize,
}

/// `eval`: test accuracy and complexity of a saved model.
pub fn cmd_eval(settings: &Settings, checkpoint: &Path, out: &mut dyn std::io::Write) -> Result<EvalSummary> {
    let mut cfg = settings.train_config()?;
    let model: BranchedModel = load_model(checkpoint)?;
    cfg.arch = model.arch.clone();
    let (_, test) = load_splits(&cfg)?;
    let report = train::evaluate(&model, &test, cfg.batch_size)?;
    let sizes = (1..=model.classifiers())
        .map(|k| model.extract_single(k).map(|m| count_params_flops(&m)).map(|c| (c.params, c.flops)))
        .collect::<Result<Vec<_>>>()?;
    let train_params = count_params_flops(&model).params;
    let w = io(Path::new("<stdout>"));
    for (k, (a, (p, f))) in report.classifiers.iter().zip(&sizes).enumerate() {
        writeln!(out, "classifier {} accuracy {a:.6} params {p} flops {f}", k + 1).map_err(&w)?;
    }
    writeln!(out, "ensemble accuracy {:.6}", report.ensemble).map_err(&w)?;
    writeln!(out, "train params {train_params}").map_err(&w)?;
    Ok(EvalSummary { accuracies: report.classifiers, ensemble: report.ensemble, sizes, train_params })
}

/// The loss ladder: cross-entropy, then KL, similarity maps and the critic
/// added one at a time.
pub const RUNGS: [&str; 4] = ["ce", "ce+kl", "ce+kl+l2", "ce+kl+l2+w"];

fn rung_settings(base: &Settings, rung: usize, seed: u64, dir: &Path) -> Result<Settings> {
    let mut s = base.clone();
    for (i, key) in ["alpha", "beta", "gamma"].into_iter().enumerate() {
        if i >= rung {
            s.set(key, "0")?;
        }
    }
    s.set("seed", &seed.to_string())?;
    s.set("checkpoint_dir", &dir.display().to_string())?;
    Ok(s)
}

pub fn ablate_header(classifiers: usize) -> String {
    let mut h = String::from("rung,seed");
    for k in 1..=classifiers {
        h.push_str(&format!(",best_acc_c{k}"));
    }
    h.push_str(",best_acc_ensemble,final_loss_ce,final_loss_kl,final_loss_l2,final_loss_w,final_loss_d,max_abs_loss_w,max_abs_loss_d,all_finite");
    h
}

/// `ablate`: every rung for every seed, one CSV row each, written to
/// `ablate.csv` in the checkpoint directory. Each run keeps its own run
/// directory underneath.
pub fn cmd_ablate(settings: &Settings, out: &mut dyn std::io::Write) -> Result<Vec<String>> {
    let base = settings.train_config()?;
    let root = run_dir(&base)?;
    std::fs::create_dir_all(&root).map_err(io(&root))?;
    let seeds = settings.seeds()?;
    let n = base.arch.branches + 1;
    let csv_path = root.join("ablate.csv");
    let mut csv = std::fs::File::create(&csv_path).map_err(io(&csv_path))?;
    writeln!(csv, "{}", ablate_header(n)).map_err(io(&csv_path))?;
    writeln!(out, "{}", ablate_header(n)).map_err(io(Path::new("<stdout>")))?;
    let mut rows = Vec::new();
    for (r, name) in RUNGS.iter().enumerate() {
        for &seed in &seeds {
            let dir = root.join(name).join(format!("seed{seed}"));
            let s = rung_settings(settings, r, seed, &dir)?;
            let cfg = s.train_config()?;
            let report = managed_run("ablate", &s, &cfg, None)?;
            let row = ablate_row(name, seed, &report);
            writeln!(csv, "{row}").map_err(io(&csv_path))?;
            writeln!(out, "{row}").map_err(io(Path::new("<stdout>")))?;
            rows.push(row);
        }
    }
    Ok(rows)
}

fn ablate_row(rung: &str, seed: u64, report: &RunReport) -> String {
    let mut row = format!("{rung},{seed}");
    for a in &report.best {
        row.push_str(&format!(",{a:.6}"));
    }
    row.push_str(&format!(",{:.6}", report.best_ensemble));
    let last = report.rows.last().map(|r| r.losses).unwrap_or_default();
    for v in [last.ce, last.kl, last.l2, last.w, last.d] {
        row.push_str(&format!(",{v:.6}"));
    }
    let max_w = report.rows.iter().map(|r| r.peak.w).fold(0.0, f64::max);
    let max_d = report.rows.iter().map(|r| r.peak.d).fold(0.0, f64::max);
    let finite = report.rows.iter().all(|r| {
        [&r.losses, &r.peak].iter().all(|l| [l.ce, l.kl, l.l2, l.w, l.d, l.total].iter().all(|v| v.is_finite()))
    });
    row.push_str(&format!(",{max_w:.6},{max_d:.6},{finite}"));
    row
}
