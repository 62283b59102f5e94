//! Config files, run directories, and the `run` / `compare` / `visualize`
//! workflows behind the command-line tool.
//!
//! A run directory contains:
//!
//! - `config.toml`: verbatim copy of the input config
//! - `manifest.json`: config hash, seeds, architecture hash, file list
//! - `R.csv`: `k,i,accuracy,pg_hit_rate` for every `i <= k`
//! - `summary.json`: ACC, BWT, PG-ACC, PG-BWT, precision/recall tables
//! - `predictions.csv`: per-sample outcomes for every evaluated cell
//! - `train_log.jsonl`: one step report per line
//! - `buffer.bin`: replay buffer after the last completed task
//! - `model_final.ckpt`, and `checkpoints/task_<k>.ckpt` when archived

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{
    acc_bwt, evaluate, precision_recall, render_progression, saliency_progression, AccuracyMatrix,
    PointingStats,
};
use crate::memory::QuotaPolicy;
use crate::model::{Classifier, ClassifierSpec, InputShape};
use crate::par;
use crate::saliency::{SaliencyMethod, SaliencySpec};
use crate::scenario::{build_scenario, ScenarioSpec, TaskData};
use crate::seed::{mix, SeedStreams};
use crate::strategies::{buffer_rrr_loss, Learner, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Overrides the directory that relative `output_dir` values resolve against.
pub const OUTPUT_ROOT_ENV: &str = "XREPLAY_OUTPUT_ROOT";

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub archive_checkpoints: bool,
    pub buffer_capacity: usize,
    #[serde(default)]
    pub buffer_policy: QuotaPolicy,
    /// Evaluate the pointing game (requires masks).
    #[serde(default = "default_true")]
    pub pointing_game: bool,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub model: ClassifierSpec,
    pub train: TrainConfig,
    pub saliency: SaliencySpec,
}

impl ExperimentConfig {
    /// Parses and validates a TOML document. Errors carry the field path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::config(field, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_toml_str(&text)?, text))
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape::rgb(self.scenario.image_size[0], self.scenario.image_size[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.scenario.validate()?;
        let classifier = Classifier::new(self.model.clone(), self.input_shape())?;
        self.saliency.validate()?;
        if self.saliency.method == SaliencyMethod::GradCam {
            if let Some(layer) = &self.saliency.target_layer {
                let shape = classifier.layer_shape(layer).ok_or_else(|| {
                    Error::config("saliency.target_layer", format!("unknown layer `{layer}`"))
                })?;
                if shape.height < 2 || shape.width < 2 {
                    return Err(Error::config(
                        "saliency.target_layer",
                        format!("`{layer}` is {}x{}; need at least 2x2", shape.height, shape.width),
                    ));
                }
            }
        }
        self.train.validate(self.buffer_capacity)?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        Ok(())
    }

    /// `output_dir`, resolved against the override root when it is relative.
    pub fn resolve_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Scenario spec with its seed derived from the master seed.
    pub fn seeded_scenario(&self) -> ScenarioSpec {
        let mut s = self.scenario.clone();
        s.seed = SeedStreams::new(self.seed).seed("scenario");
        s.require_masks = s.require_masks || self.pointing_game;
        s
    }
}

/// A failed run, with the exit code the command-line tool reports.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Invalid(Error),
    #[error("task {task} failed: {source}")]
    Task { task: usize, source: Error },
    #[error("{0}")]
    Runtime(Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => RunError::Invalid(e),
            e => RunError::Runtime(e),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tasks: usize,
    pub strategy: String,
    pub rrr_enabled: bool,
    pub saliency_method: SaliencyMethod,
    pub acc: f64,
    pub bwt: f64,
    pub pg_acc: Option<f64>,
    pub pg_bwt: Option<f64>,
    /// `accuracy[k-1][i-1]` for `i <= k`.
    pub accuracy: Vec<Vec<f64>>,
    pub pg_hit_rate: Option<Vec<Vec<f64>>>,
    /// Mean of each accuracy row: accuracy on all classes seen so far.
    pub mean_accuracy_curve: Vec<f64>,
    /// `Pr_{i,i}` and `Re_{i,i}`, right after task `i`.
    pub precision_diag: Vec<Option<f64>>,
    pub recall_diag: Vec<Option<f64>>,
    /// `Pr_{T,i}` and `Re_{T,i}`, after the final task.
    pub precision_final: Vec<Option<f64>>,
    pub recall_final: Vec<Option<f64>>,
    /// Mean L1 saliency drift over the final buffer.
    pub buffer_rrr_loss: Option<f64>,
    pub buffer_counts: Vec<(usize, usize)>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn checkpoint_path(run_dir: &Path, k: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("task_{k}.ckpt"))
}

/// Runs the full task sequence and writes the run directory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    config_text: &str,
    run_dir: &Path,
) -> std::result::Result<RunSummary, RunError> {
    cfg.validate()?;
    let classifier = Classifier::new(cfg.model.clone(), cfg.input_shape())?;
    let spec_hash = classifier.spec_hash();
    let tasks = build_scenario(&cfg.seeded_scenario())?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    if cfg.archive_checkpoints {
        let d = run_dir.join("checkpoints");
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write(&run_dir.join("config.toml"), config_text)?;

    let mut learner = Learner::new(
        classifier.clone(),
        cfg.train.clone(),
        cfg.saliency.clone(),
        cfg.buffer_capacity,
        cfg.buffer_policy,
        cfg.seed,
    )?;
    let t = tasks.len();
    let mut r = AccuracyMatrix::new(t);
    let mut r_pg = AccuracyMatrix::new(t);
    let mut pg_available = cfg.pointing_game;
    let mut stats: BTreeMap<(usize, usize), PointingStats> = BTreeMap::new();
    let mut log = String::new();
    let mut predictions = String::from("k,task,index,label,predicted,correct,hit\n");
    let xai = cfg.pointing_game.then_some(&cfg.saliency);

    for task in &tasks {
        let k = task.task_id;
        let fail = |source: Error| RunError::Task { task: k, source };
        info!("task {k}/{t}: classes {:?}", task.class_ids);
        let reports = learner.learn_task(task).map_err(fail)?;
        for rep in &reports {
            log.push_str(&serde_json::to_string(rep).map_err(|e| fail(e.into()))?);
            log.push('\n');
        }
        if cfg.archive_checkpoints {
            checkpoint::save_model(&checkpoint_path(run_dir, k), &learner.state, &spec_hash)
                .map_err(fail)?;
        }
        checkpoint::save_buffer(&run_dir.join("buffer.bin"), &learner.buffer, &spec_hash)
            .map_err(fail)?;
        let row = evaluate(&classifier, &learner.state, &tasks, k, xai).map_err(fail)?;
        for (i, acc) in row.accuracy.iter().enumerate() {
            r.set(k, i + 1, *acc).map_err(fail)?;
        }
        for (i, st) in row.pointing.iter().enumerate() {
            match st {
                Some(st) => {
                    r_pg.set(k, i + 1, st.hit_rate().unwrap_or(0.0)).map_err(fail)?;
                    stats.insert((k, i + 1), *st);
                }
                None => pg_available = false,
            }
        }
        for p in &row.predictions {
            let hit = p.hit.map(|h| (h as u8).to_string()).unwrap_or_default();
            let _ = writeln!(
                predictions,
                "{k},{},{},{},{},{},{hit}",
                p.task, p.index, p.label, p.predicted, p.correct as u8
            );
        }
        info!("task {k}: row mean accuracy {:.4}", r.row_mean(k).unwrap_or(0.0));
    }

    let final_task = t;
    checkpoint::save_model(&run_dir.join("model_final.ckpt"), &learner.state, &spec_hash)
        .map_err(|e| RunError::Task { task: final_task, source: e })?;

    let (acc, bwt) = acc_bwt(&r)?;
    let (pg_acc, pg_bwt) = if pg_available {
        let (a, b) = acc_bwt(&r_pg)?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    let matrix = |m: &AccuracyMatrix| -> Vec<Vec<f64>> {
        (1..=t)
            .map(|k| (1..=k).map(|i| m.get(k, i).unwrap_or(f64::NAN)).collect())
            .collect()
    };
    let pr = |k: usize, i: usize| stats.get(&(k, i)).map(precision_recall);
    let buffer_loss = if learner.buffer.is_empty() {
        None
    } else {
        Some(
            buffer_rrr_loss(&classifier, &learner.state, &learner.buffer, &cfg.saliency)
                .map_err(|e| RunError::Task { task: final_task, source: e })?,
        )
    };
    let summary = RunSummary {
        tasks: t,
        strategy: cfg.train.strategy.as_str().into(),
        rrr_enabled: cfg.train.rrr_enabled,
        saliency_method: cfg.saliency.method,
        acc,
        bwt,
        pg_acc,
        pg_bwt,
        accuracy: matrix(&r),
        pg_hit_rate: pg_available.then(|| matrix(&r_pg)),
        mean_accuracy_curve: (1..=t).map(|k| r.row_mean(k).unwrap_or(f64::NAN)).collect(),
        precision_diag: (1..=t).map(|i| pr(i, i).and_then(|p| p.0)).collect(),
        recall_diag: (1..=t).map(|i| pr(i, i).and_then(|p| p.1)).collect(),
        precision_final: (1..=t).map(|i| pr(t, i).and_then(|p| p.0)).collect(),
        recall_final: (1..=t).map(|i| pr(t, i).and_then(|p| p.1)).collect(),
        buffer_rrr_loss: buffer_loss,
        buffer_counts: learner.buffer.per_task_counts(),
    };

    let mut csv = String::from("k,i,accuracy,pg_hit_rate\n");
    for k in 1..=t {
        for i in 1..=k {
            let pg = if pg_available { r_pg.get(k, i) } else { None };
            let _ = writeln!(csv, "{k},{i},{},{}", r.get(k, i).expect("filled"), fmt_opt(pg));
        }
    }
    write(&run_dir.join("R.csv"), csv)?;
    write(&run_dir.join("summary.json"), serde_json::to_vec_pretty(&summary).map_err(Error::from)?)?;
    write(&run_dir.join("train_log.jsonl"), log)?;
    write(&run_dir.join("predictions.csv"), predictions)?;

    let mut files = vec![
        "config.toml".to_string(),
        "R.csv".into(),
        "summary.json".into(),
        "predictions.csv".into(),
        "train_log.jsonl".into(),
        "buffer.bin".into(),
        "model_final.ckpt".into(),
    ];
    if cfg.archive_checkpoints {
        files.extend((1..=t).map(|k| format!("checkpoints/task_{k}.ckpt")));
    }
    let manifest = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config_sha256": sha256_hex(config_text.as_bytes()),
        "seed": cfg.seed,
        "scenario_seed": cfg.seeded_scenario().seed,
        "architecture_sha256": sha256_hex(&spec_hash),
        "execution_mode": par::MODE,
        "tasks": t,
        "archive_checkpoints": cfg.archive_checkpoints,
        "files": files,
        "visualizations": [],
    });
    write(
        &run_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).map_err(Error::from)?,
    )?;
    Ok(summary)
}

/// Loads a config file and runs it into its resolved output directory.
pub fn run_from_path(path: &Path) -> std::result::Result<(PathBuf, RunSummary), RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Runtime(Error::io(path, e)))?;
    let cfg = ExperimentConfig::from_toml_str(&text)?;
    let dir = cfg.resolve_output_dir();
    let summary = run_experiment(&cfg, &text, &dir)?;
    Ok((dir, summary))
}

pub fn load_summary(run_dir: &Path) -> Result<RunSummary> {
    let p = run_dir.join("summary.json");
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Mean and sample standard deviation (`None` for a single value).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// One arm of a comparison: a run directory or a directory of seed runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Arm {
    pub name: String,
    pub runs: Vec<PathBuf>,
    pub curve_mean: Vec<f64>,
    pub curve_std: Vec<Option<f64>>,
    pub acc_mean: f64,
    pub acc_std: Option<f64>,
    pub bwt_mean: f64,
    pub bwt_std: Option<f64>,
    pub buffer_rrr_loss_mean: Option<f64>,
}

fn arm_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("summary.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.json").is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a completed run directory and holds none",
            dir.display()
        )));
    }
    Ok(runs)
}

fn load_arm(dir: &Path) -> Result<(Arm, usize)> {
    let runs = arm_runs(dir)?;
    let summaries = runs.iter().map(|r| load_summary(r)).collect::<Result<Vec<_>>>()?;
    let t = summaries[0].tasks;
    if let Some((r, s)) = runs.iter().zip(&summaries).find(|(_, s)| s.tasks != t) {
        return Err(Error::InvalidArgument(format!(
            "{} has {} tasks, expected {t}",
            r.display(),
            s.tasks
        )));
    }
    let column = |f: &dyn Fn(&RunSummary) -> f64| -> Vec<f64> { summaries.iter().map(f).collect() };
    let mut curve_mean = Vec::with_capacity(t);
    let mut curve_std = Vec::with_capacity(t);
    for k in 0..t {
        let (m, s) = mean_std(&column(&|x| x.mean_accuracy_curve[k]));
        curve_mean.push(m);
        curve_std.push(s);
    }
    let (acc_mean, acc_std) = mean_std(&column(&|x| x.acc));
    let (bwt_mean, bwt_std) = mean_std(&column(&|x| x.bwt));
    let losses: Option<Vec<f64>> = summaries.iter().map(|s| s.buffer_rrr_loss).collect();
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok((
        Arm {
            name,
            runs,
            curve_mean,
            curve_std,
            acc_mean,
            acc_std,
            bwt_mean,
            bwt_std,
            buffer_rrr_loss_mean: losses.map(|l| mean_std(&l).0),
        },
        t,
    ))
}

/// Palette for plot lines, in arm order.
pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), colour: Rgb<u8>, thick: i64) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let (x, y) = (a.0 + (b.0 - a.0) * f, a.1 + (b.1 - a.1) * f);
        for dy in -thick..=thick {
            for dx in -thick..=thick {
                let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, colour);
                }
            }
        }
    }
}

/// Accuracy-over-tasks plot: y from 0 to 1 with grid lines every 0.1, one
/// line per arm (colours from [`PALETTE`]) with std error bars.
pub fn render_curves(arms: &[Arm]) -> RgbImage {
    let (w, h, m) = (640u32, 400u32, 40.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let t = arms.first().map_or(1, |a| a.curve_mean.len());
    let x_of = |k: usize| {
        if t == 1 {
            w as f64 / 2.0
        } else {
            m + (w as f64 - 2.0 * m) * k as f64 / (t - 1) as f64
        }
    };
    let y_of = |v: f64| h as f64 - m - (h as f64 - 2.0 * m) * v.clamp(0.0, 1.0);
    for g in 0..=10 {
        let y = y_of(g as f64 / 10.0);
        let c = if g == 0 { Rgb([0, 0, 0]) } else { Rgb([225, 225, 225]) };
        draw_line(&mut img, (m, y), (w as f64 - m, y), c, 0);
    }
    draw_line(&mut img, (m, y_of(0.0)), (m, y_of(1.0)), Rgb([0, 0, 0]), 0);
    for k in 0..t {
        let x = x_of(k);
        draw_line(&mut img, (x, y_of(0.0)), (x, y_of(0.0) + 5.0), Rgb([0, 0, 0]), 0);
    }
    for (ai, arm) in arms.iter().enumerate() {
        let c = Rgb(PALETTE[ai % PALETTE.len()]);
        for k in 0..t {
            let (x, y) = (x_of(k), y_of(arm.curve_mean[k]));
            if let Some(s) = arm.curve_std[k] {
                let lo = y_of(arm.curve_mean[k] - s);
                let hi = y_of(arm.curve_mean[k] + s);
                draw_line(&mut img, (x, lo), (x, hi), c, 0);
                draw_line(&mut img, (x - 4.0, lo), (x + 4.0, lo), c, 0);
                draw_line(&mut img, (x - 4.0, hi), (x + 4.0, hi), c, 0);
            }
            if k + 1 < t {
                draw_line(&mut img, (x, y), (x_of(k + 1), y_of(arm.curve_mean[k + 1])), c, 1);
            }
            draw_line(&mut img, (x - 3.0, y), (x + 3.0, y), c, 2);
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub tasks: usize,
    pub arms: Vec<Arm>,
    /// `diffs[j][k]`: curve of arm `j + 1` minus arm 0 after task `k + 1`.
    pub diffs: Vec<Vec<f64>>,
}

/// Compares at least two arms and writes `comparison.csv`,
/// `comparison.json` and `comparison.png` into `out`.
pub fn compare(dirs: &[PathBuf], out: &Path) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::InvalidArgument("compare needs at least two run directories".into()));
    }
    let loaded = par::map_slice(dirs, |d| load_arm(d));
    let mut arms = Vec::with_capacity(dirs.len());
    let mut t = None;
    for (dir, l) in dirs.iter().zip(loaded) {
        let (arm, tasks) = l?;
        match t {
            None => t = Some(tasks),
            Some(t0) if t0 != tasks => {
                return Err(Error::InvalidArgument(format!(
                    "{} has {tasks} tasks but the first arm has {t0}",
                    dir.display()
                )))
            }
            _ => {}
        }
        arms.push(arm);
    }
    let t = t.expect("at least two arms");
    let diffs: Vec<Vec<f64>> = arms[1..]
        .iter()
        .map(|a| (0..t).map(|k| a.curve_mean[k] - arms[0].curve_mean[k]).collect())
        .collect();

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut header = String::from("k");
    for a in &arms {
        let _ = write!(header, ",{0}_mean,{0}_std", a.name);
    }
    for a in &arms[1..] {
        let _ = write!(header, ",diff_{}_minus_{}", a.name, arms[0].name);
    }
    let mut csv = header + "\n";
    for k in 0..t {
        let _ = write!(csv, "{}", k + 1);
        for a in &arms {
            let _ = write!(csv, ",{},{}", a.curve_mean[k], fmt_opt(a.curve_std[k]));
        }
        for d in &diffs {
            let _ = write!(csv, ",{}", d[k]);
        }
        csv.push('\n');
    }
    write(&out.join("comparison.csv"), csv)?;
    let cmp = Comparison {
        tasks: t,
        arms,
        diffs,
    };
    let legend: Vec<_> = cmp
        .arms
        .iter()
        .enumerate()
        .map(|(i, a)| serde_json::json!({"arm": a.name, "rgb": PALETTE[i % PALETTE.len()]}))
        .collect();
    let json = serde_json::json!({ "comparison": &cmp, "plot_legend": legend });
    write(&out.join("comparison.json"), serde_json::to_vec_pretty(&json)?)?;
    let png = out.join("comparison.png");
    render_curves(&cmp.arms).save(&png)?;
    Ok(cmp)
}

/// A test sample: task id and index within its test set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub task: usize,
    pub index: usize,
}

impl std::str::FromStr for SampleRef {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (t, i) = s
            .split_once(':')
            .ok_or_else(|| format!("expected <task>:<index>, got `{s}`"))?;
        let task = t.trim().parse().map_err(|_| format!("bad task in `{s}`"))?;
        let index = i.trim().parse().map_err(|_| format!("bad index in `{s}`"))?;
        if task == 0 {
            return Err("tasks are numbered from 1".into());
        }
        Ok(SampleRef { task, index })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub checkpoint: usize,
    pub predicted: usize,
    pub correct: bool,
    pub annotation: String,
}

/// Renders the saliency progression of one test sample across archived
/// checkpoints. Returns the written image and annotation paths.
pub fn visualize(run_dir: &Path, sample: SampleRef, checkpoints: &[usize]) -> Result<(PathBuf, PathBuf)> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints requested".into()));
    }
    if let Some(&k) = checkpoints.iter().find(|&&k| k < sample.task) {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {k} precedes task {} of the sample; its class is not learned yet",
            sample.task
        )));
    }
    let cfg_path = run_dir.join("config.toml");
    let (cfg, _) = ExperimentConfig::load(&cfg_path)?;
    for &k in checkpoints {
        if !checkpoint_path(run_dir, k).is_file() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint for task {k} not found under {}; re-run with archive_checkpoints = true",
                run_dir.join("checkpoints").display()
            )));
        }
    }
    let classifier = Classifier::new(cfg.model.clone(), cfg.input_shape())?;
    let hash = classifier.spec_hash();
    let tasks: Vec<TaskData> = build_scenario(&cfg.seeded_scenario())?;
    let task = tasks.get(sample.task - 1).ok_or_else(|| {
        Error::InvalidArgument(format!("run has {} tasks, asked for {}", tasks.len(), sample.task))
    })?;
    let s = task.test.get(sample.index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "task {} has {} test samples, asked for index {}",
            sample.task,
            task.test.len(),
            sample.index
        ))
    })?;
    let states = checkpoints
        .iter()
        .map(|&k| Ok((k, checkpoint::load_model(&checkpoint_path(run_dir, k), &hash)?)))
        .collect::<Result<Vec<_>>>()?;
    let noise_seed = mix(sample.task as u64, &[sample.index as u64]);
    let panels = saliency_progression(&classifier, &s.image, s.label, &states, &cfg.saliency, noise_seed)?;

    let dir = run_dir.join("visualizations");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = format!("progression_t{}_i{}", sample.task, sample.index);
    let png = dir.join(format!("{stem}.png"));
    render_progression(&s.image, &panels, 4).save(&png)?;
    let records: Vec<PanelRecord> = panels
        .iter()
        .map(|p| PanelRecord {
            checkpoint: p.checkpoint,
            predicted: p.predicted,
            correct: p.correct,
            annotation: p.annotation().into(),
        })
        .collect();
    let json = dir.join(format!("{stem}.json"));
    let doc = serde_json::json!({
        "task": sample.task,
        "index": sample.index,
        "label": s.label,
        "panels": records,
    });
    write(&json, serde_json::to_vec_pretty(&doc)?)?;

    let mpath = run_dir.join("manifest.json");
    if let Ok(bytes) = fs::read(&mpath) {
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes)?;
        if let Some(list) = manifest.get_mut("visualizations").and_then(|v| v.as_array_mut()) {
            for f in [&png, &json] {
                let rel = f.strip_prefix(run_dir).unwrap_or(f).display().to_string();
                let v = serde_json::Value::String(rel);
                if !list.contains(&v) {
                    list.push(v);
                }
            }
        }
        write(&mpath, serde_json::to_vec_pretty(&manifest)?)?;
    }
    Ok((png, json))
}

/// Parses `"1,3,5"` into checkpoint indices.
pub fn parse_checkpoint_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad checkpoint `{p}`")))
        .collect()
}
