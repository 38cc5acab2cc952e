//! The command implementations behind the `irstd-diff` binary. Each command
//! writes into its own output directory and returns a human-readable
//! summary.

use std::fs;
use std::path::{Path, PathBuf};

use irstd_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, TrainConfig};
use crate::data::{load_dataset, load_mask, save_mask, synth_dataset, Sample, SynthSpec};
use crate::diffusion::{full_timesteps, strided_timesteps};
use crate::error::{Error, Result};
use crate::infer::{predict, score, InferOptions};
use crate::losses::insensitivity_report;
use crate::metrics::{evaluate, BinaryMask, EvalReport};
use crate::model::IrstdDiff;
use crate::plot::{self, Axes, Series};
use crate::trainer::{step_records, LogRecord, Trainer, LOG_FILE};

pub const CONFIG_ECHO: &str = "config.txt";
pub const MANIFEST: &str = "manifest.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// Loads `split` (`train` or `test`) from a data source.
pub fn load_split(source: &DataSource, split: &str, resolution: usize, workers: usize) -> Result<Vec<Sample>> {
    match source {
        DataSource::Synthetic { train, test, seed } => {
            let (count, seed) = match split {
                "train" => (*train, *seed),
                "test" => (*test, seed.wrapping_add(1)),
                other => return Err(Error::Data(format!("synthetic data has no `{other}` split"))),
            };
            let spec = SynthSpec {
                resolution,
                ..SynthSpec::toy(count, seed)
            };
            Ok(synth_dataset(&spec)?.0)
        }
        DataSource::Dir(root) => load_dataset(root, split, Some(resolution), workers),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Trains from `cfg`, optionally resuming, up to `until` steps.
pub fn cmd_train(
    cfg: TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    until: Option<u64>,
    verbose: bool,
) -> Result<String> {
    fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config != cfg {
                return Err(Error::Config(
                    "the resume checkpoint was written with a different configuration".into(),
                ));
            }
            Trainer::resume(&ck)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    fs::write(out.join(CONFIG_ECHO), cfg.to_text())?;
    let train = load_split(&cfg.data, "train", cfg.image_size, cfg.workers)?;
    let test = if cfg.eval_every > 0 {
        load_split(&cfg.data, "test", cfg.image_size, cfg.workers)?
    } else {
        Vec::new()
    };
    let records = trainer.run(&train, &test, Some(out), until.unwrap_or(u64::MAX), |r| {
        if verbose {
            match r {
                LogRecord::Step(s) => eprintln!(
                    "step {:>6}  loss {:.5}  mse {:.5}  bce {:.5}  lr {:.3e}",
                    s.step, s.loss, s.noise_mse, s.bce_loss, s.lr
                ),
                LogRecord::Eval(e) => eprintln!(
                    "eval {:>6}  IoU {:.4}  Pd {:.4}  Fa {:.3e}{}",
                    e.step,
                    e.iou,
                    e.pd,
                    e.fa,
                    if e.best { "  (best)" } else { "" }
                ),
                _ => {}
            }
        }
    })?;
    let steps = step_records(&records);
    let last = steps.last().map_or("no steps run".to_string(), |s| {
        format!("final loss {:.5} (noise mse {:.5})", s.loss, s.noise_mse)
    });
    let best = trainer
        .best
        .map_or(String::new(), |(s, iou)| format!("; best eval IoU {iou:.4} at step {s}"));
    Ok(format!(
        "trained to step {} of {}: {last}{best}\nlog: {}\n",
        trainer.step,
        cfg.steps,
        out.join(LOG_FILE).display()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub checkpoint: String,
    pub checkpoint_step: u64,
    pub split: String,
    pub seed: u64,
    pub ensemble: usize,
    pub timesteps: Vec<usize>,
    pub ids: Vec<String>,
    pub config: String,
    pub report: Option<EvalSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub iou: f64,
    pub pd: f64,
    pub fa: f64,
    pub auc: Option<f64>,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            iou: r.iou,
            pd: r.pd,
            fa: r.fa,
            auc: r.auc,
        }
    }
}

/// Options of [`cmd_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    /// Overrides the data source stored in the checkpoint.
    pub data: Option<PathBuf>,
    pub split: String,
    /// Number of visited timesteps; `None` runs all of them.
    pub stride: Option<usize>,
    pub ensemble: usize,
    pub seed: u64,
}

fn score_png(logits: &Tensor<f32>) -> image::GrayImage {
    let (h, w) = logits.dims2();
    let px = logits
        .data()
        .iter()
        .map(|&v| (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::ImageBuffer::from_raw(w as u32, h as u32, px).expect("buffer matches dimensions")
}

/// Samples masks for a split; writes `masks/`, `scores/`, a manifest and,
/// when ground truth is present, an evaluation report.
pub fn cmd_sample(args: &SampleArgs, out: &Path) -> Result<String> {
    if !args.checkpoint.is_file() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", args.checkpoint.display())));
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut model = IrstdDiff::new(ck.model.clone(), 0)?;
    ck.copy_params_into(&mut model.params)?;
    let sched = ck.config.schedule()?;
    let source = args.data.clone().map_or(ck.config.data.clone(), DataSource::Dir);
    let samples = load_split(&source, &args.split, ck.model.image_size, ck.config.workers)?;
    let timesteps = match args.stride {
        Some(k) => strided_timesteps(sched.steps, k)?,
        None => full_timesteps(sched.steps),
    };
    let opts = InferOptions {
        timesteps: Some(timesteps.clone()),
        seed: args.seed,
        ensemble: args.ensemble,
        ..InferOptions::new(args.seed)
    };
    let preds = predict(&model, &sched, &samples, &opts)?;
    for dir in ["masks", "scores"] {
        fs::create_dir_all(out.join(dir))?;
    }
    for p in &preds {
        let file = format!("{}.png", p.id);
        save_mask(&p.mask, &out.join("masks").join(&file))?;
        let path = out.join("scores").join(&file);
        score_png(&p.logits)
            .save(&path)
            .map_err(|source| Error::Image { path, source })?;
    }
    let report = score(&preds, &samples)?;
    write_json(&out.join(REPORT_JSON), &report)?;
    fs::write(out.join(REPORT_TEXT), report.summary() + "\n")?;
    let manifest = SampleManifest {
        checkpoint: args.checkpoint.display().to_string(),
        checkpoint_step: ck.state.step,
        split: args.split.clone(),
        seed: args.seed,
        ensemble: args.ensemble,
        timesteps,
        ids: preds.iter().map(|p| p.id.clone()).collect(),
        config: ck.config.to_text(),
        report: Some(EvalSummary::from(&report)),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(format!(
        "{} masks written to {} ({} steps, ensemble {})\n{}\n",
        preds.len(),
        out.join("masks").display(),
        manifest.timesteps.len(),
        args.ensemble,
        report.summary()
    ))
}

/// `dir/masks` when it exists, else `dir`.
fn mask_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("masks");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn load_scores(dir: &Path, ids: &[String]) -> Result<Option<Vec<Tensor<f32>>>> {
    let sdir = dir.join("scores");
    if !sdir.is_dir() {
        return Ok(None);
    }
    ids.iter()
        .map(|id| {
            let path = sdir.join(format!("{id}.png"));
            let img = image::open(&path)
                .map_err(|source| Error::Image { path, source })?
                .into_luma8();
            let (w, h) = img.dimensions();
            let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Ok(Tensor::from_vec([h as usize, w as usize], data))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Scores a directory of predicted masks against ground-truth masks with the
/// same file names. ROC/AUC is added when `pred/scores` holds score maps.
pub fn cmd_evaluate(pred: &Path, gt: &Path, out: &Path) -> Result<(EvalReport, String)> {
    let (pdir, gdir) = (mask_dir(pred), mask_dir(gt));
    let (pids, gids) = (png_ids(&pdir)?, png_ids(&gdir)?);
    if pids.is_empty() {
        return Err(Error::Data(format!("no PNG masks in {}", pdir.display())));
    }
    if pids != gids {
        let missing: Vec<&String> = gids.iter().filter(|g| !pids.contains(g)).collect();
        let extra: Vec<&String> = pids.iter().filter(|p| !gids.contains(p)).collect();
        return Err(Error::Data(format!(
            "prediction and ground-truth sets differ (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    let load = |dir: &Path| -> Result<Vec<BinaryMask>> {
        pids.iter().map(|id| load_mask(&dir.join(format!("{id}.png")))).collect()
    };
    let (preds, gts) = (load(&pdir)?, load(&gdir)?);
    let scores = load_scores(pred, &pids)?;
    let report = match evaluate(&preds, &gts, scores.as_deref()) {
        Err(Error::UndefinedMetric(_)) if scores.is_some() => evaluate::<f32>(&preds, &gts, None)?,
        other => other?,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join(REPORT_JSON), &report)?;
    let text = report.summary() + "\n";
    fs::write(out.join(REPORT_TEXT), &text)?;
    Ok((report, text))
}

/// The target-level insensitivity table.
pub fn cmd_analyze(
    resolution: usize,
    batch: usize,
    target_px: usize,
    fp_px: usize,
    fp_conf: f64,
    out: Option<&Path>,
) -> Result<String> {
    let rep = insensitivity_report(resolution, batch, target_px, fp_px, fp_conf)?;
    let table = rep.to_table();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(REPORT_JSON), &rep)?;
        fs::write(dir.join(REPORT_TEXT), &table)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// LIW decomposition levels; one training run per value.
    K,
    /// Diffusion steps; one training run per value.
    T,
    /// Visited sampling steps of a trained model.
    Stride,
    /// Ensemble size of a trained model.
    Ensemble,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" | "K" => Ok(Self::K),
            "T" | "t" => Ok(Self::T),
            "stride" => Ok(Self::Stride),
            "ensemble" => Ok(Self::Ensemble),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}` (k, T, stride, ensemble)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub iou: f64,
    pub pd: f64,
    pub fa: f64,
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:<10}{:>8}{:>10}{:>10}{:>12}\n", "axis", "value", "IoU", "Pd", "Fa");
    for r in rows {
        s.push_str(&format!(
            "{:<10}{:>8}{:>10.4}{:>10.4}{:>12.3e}\n",
            format!("{:?}", r.axis).to_lowercase(),
            r.value,
            r.iou,
            r.pd,
            r.fa
        ));
    }
    s
}

/// Compares values along one axis. `k` and `T` train a model per value from
/// `cfg`; `stride` and `ensemble` sample the model in `checkpoint`.
pub fn cmd_sweep(
    axis: SweepAxis,
    values: &[usize],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<(Vec<SweepRow>, String)> {
    if values.is_empty() {
        return Err(Error::Config("the sweep has no values".into()));
    }
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let report = match axis {
            SweepAxis::K | SweepAxis::T => {
                let mut c = cfg.clone();
                match axis {
                    SweepAxis::K => c.liw_levels = v,
                    _ => {
                        c.diffusion_steps = v;
                        c.eval_stride = c.eval_stride.min(v);
                    }
                }
                c.validate()?;
                let run = out.join(format!("{}_{v}", if axis == SweepAxis::K { "k" } else { "T" }));
                cmd_train(c.clone(), &run, None, None, false)?;
                let args = SampleArgs {
                    checkpoint: run.join(crate::trainer::LAST_CHECKPOINT),
                    data: None,
                    split: "test".into(),
                    stride: None,
                    ensemble: 1,
                    seed,
                };
                cmd_sample(&args, &run.join("sample"))?;
                let r: EvalReport = serde_json::from_str(&fs::read_to_string(run.join("sample").join(REPORT_JSON))?)?;
                r
            }
            SweepAxis::Stride | SweepAxis::Ensemble => {
                let ck = checkpoint
                    .ok_or_else(|| Error::Config("stride and ensemble sweeps need a checkpoint".into()))?;
                let args = SampleArgs {
                    checkpoint: ck.to_path_buf(),
                    data: None,
                    split: "test".into(),
                    stride: (axis == SweepAxis::Stride).then_some(v),
                    ensemble: if axis == SweepAxis::Ensemble { v } else { 1 },
                    seed,
                };
                let dir = out.join(format!("{}_{v}", if axis == SweepAxis::Stride { "stride" } else { "ensemble" }));
                cmd_sample(&args, &dir)?;
                serde_json::from_str(&fs::read_to_string(dir.join(REPORT_JSON))?)?
            }
        };
        rows.push(SweepRow {
            axis,
            value: v,
            iou: report.iou,
            pd: report.pd,
            fa: report.fa,
        });
    }
    let table = sweep_table(&rows);
    let mut jsonl = String::new();
    for r in &rows {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    fs::write(out.join("sweep.jsonl"), jsonl)?;
    fs::write(out.join("sweep.txt"), &table)?;
    Ok((rows, table))
}

/// Renders each input to PNG: training logs (`*.jsonl`) become loss curves,
/// evaluation reports (`*.json`) become ROC curves. Returns written paths.
pub fn cmd_plot(inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(Error::Config("nothing to plot".into()));
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for input in inputs {
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        let parent = input
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or("");
        let name = if parent.is_empty() { stem.to_string() } else { format!("{parent}_{stem}") };
        let (img, suffix) = if input.extension().is_some_and(|e| e == "jsonl") {
            let records = crate::trainer::read_log(input)?;
            let steps = step_records(&records);
            let mse = Series {
                points: steps.iter().map(|s| (s.step as f64, s.noise_mse)).collect(),
            };
            let total = Series {
                points: steps.iter().map(|s| (s.step as f64, s.loss)).collect(),
            };
            let series = [total, mse];
            (plot::line_chart(&series, Axes::fit(&series, true)?), "loss")
        } else {
            let text = fs::read_to_string(input)?;
            let report: EvalReport = serde_json::from_str(&text)?;
            if report.roc.is_empty() {
                return Err(Error::Data(format!("{} holds no ROC points", input.display())));
            }
            let fa_max = report.roc.iter().map(|p| p.fa).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            let series = [Series {
                points: report.roc.iter().map(|p| (p.fa / fa_max, p.pd)).collect(),
            }];
            let axes = Axes {
                x: (0.0, 1.0),
                y: (0.0, 1.0),
                log_y: false,
            };
            (plot::line_chart(&series, axes), "roc")
        };
        let path = out.join(format!("{name}_{suffix}.png"));
        plot::save(&img, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes a synthetic dataset in the directory layout.
pub fn cmd_synth(train: usize, test: usize, seed: u64, resolution: usize, out: &Path) -> Result<String> {
    let spec = |count, seed| SynthSpec {
        resolution,
        ..SynthSpec::toy(count, seed)
    };
    let (a, ma) = synth_dataset(&spec(train, seed))?;
    let (b, mb) = synth_dataset(&spec(test, seed.wrapping_add(1)))?;
    // Test ids continue after the training ids so the two never collide.
    let renamed: Vec<(Sample, crate::data::SynthMeta)> = b
        .into_iter()
        .zip(mb)
        .enumerate()
        .map(|(i, (mut s, mut m))| {
            s.id = format!("synth_{:05}", train + i);
            m.id = s.id.clone();
            (s, m)
        })
        .collect();
    let (b, mb): (Vec<Sample>, Vec<_>) = renamed.into_iter().unzip();
    let splits = [
        ("train", a.iter().map(|s| s.id.clone()).collect()),
        ("test", b.iter().map(|s| s.id.clone()).collect()),
    ];
    let all: Vec<Sample> = a.into_iter().chain(b).collect();
    let meta: Vec<_> = ma.into_iter().chain(mb).collect();
    crate::data::write_dataset(out, &all, &splits, Some(&meta))?;
    Ok(format!("{} train + {} test samples written to {}\n", train, test, out.display()))
}
