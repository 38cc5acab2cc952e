//! Joint optimization of the conditional encoder and the noise estimator.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use irstd_nn::optim::{clip_grad_norm, linear_decay, AdamW};
use irstd_nn::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState, TrainerState};
use crate::config::TrainConfig;
use crate::data::{stack_images, stack_masks, Sample};
use crate::diffusion::{mask_to_signal, q_sample_batch, strided_timesteps, NoiseSchedule};
use crate::error::{Error, Result};
use crate::infer::{predict, score, InferOptions};
use crate::losses::combined_objective;
use crate::metrics::EvalReport;
use crate::model::IrstdDiff;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub noise_mse: f64,
    pub bce_loss: f64,
    pub iou_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub iou: f64,
    pub pd: f64,
    pub fa: f64,
    pub best: bool,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        start_step: u64,
        params: usize,
        /// Canonical `key = value` echo of the run configuration.
        config: String,
    },
    Step(StepRecord),
    Eval(EvalRecord),
    Checkpoint { step: u64, path: String },
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub sched: NoiseSchedule,
    pub model: IrstdDiff,
    pub opt: AdamW<f32>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub best: Option<(u64, f64)>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = IrstdDiff::new(cfg.model()?, cfg.seed)?;
        let opt = AdamW::new(&model.params, cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            sched: cfg.schedule()?,
            cfg,
            model,
            opt,
            step: 0,
            best: None,
            rng,
        })
    }

    /// Restores the exact state captured by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config.clone())?;
        if t.model.cfg != ck.model {
            return Err(Error::Checkpoint("model configuration does not match the run config".into()));
        }
        ck.copy_params_into(&mut t.model.params)?;
        if ck.moments.len() != t.model.params.len() {
            return Err(Error::Checkpoint("checkpoint carries no optimizer state".into()));
        }
        for (i, (m, v)) in ck.moments.iter().enumerate() {
            if m.shape() != t.opt.m[i].shape() || v.shape() != t.opt.v[i].shape() {
                return Err(Error::Checkpoint(format!("optimizer moment {i} has the wrong shape")));
            }
            t.opt.m[i] = m.clone();
            t.opt.v[i] = v.clone();
        }
        t.opt.step = ck.state.opt_step;
        t.step = ck.state.step;
        t.best = ck.state.best;
        t.rng = ck.state.rng.restore();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.model.cfg.clone(),
            state: TrainerState {
                step: self.step,
                rng: RngState::capture(&self.rng),
                opt_step: self.opt.step,
                best: self.best,
            },
            params: self.model.params.clone(),
            moments: self.opt.m.iter().cloned().zip(self.opt.v.iter().cloned()).collect(),
        }
    }

    /// One optimizer step on a random batch.
    pub fn train_step(&mut self, train: &[Sample]) -> Result<StepRecord> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let bsz = self.cfg.batch;
        let picks: Vec<&Sample> = (0..bsz).map(|_| &train[self.rng.random_range(0..train.len())]).collect();
        let ts: Vec<usize> = (0..bsz).map(|_| self.rng.random_range(1..=self.sched.steps)).collect();
        let images = stack_images(&picks);
        let gt = stack_masks(&picks);
        let eps = Tensor::<f32>::randn(gt.shape().to_vec(), &mut self.rng);
        let xt = q_sample_batch(&mask_to_signal(&gt), &ts, &eps, &self.sched)?;

        let tape = Tape::new();
        let p = self.model.params.bind(&tape);
        let (eps_hat, prob) = self.model.forward(&p, &Var::constant(xt), &Var::constant(images), &ts)?;
        let (loss, report) = combined_objective(&eps, &eps_hat, &prob, &gt, self.cfg.lambda)?;
        let step = self.step + 1;
        if !report.combined.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "noise_mse {} bce {} iou {}",
                    report.noise_mse, report.bce_loss, report.iou_loss
                ),
            });
        }
        let mut grads = tape.backward(&loss);
        let mut grads = p.collect_grads(&mut grads);
        drop(p);
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "gradient norm is not finite".into(),
            });
        }
        let lr = linear_decay(self.cfg.lr, self.step, self.cfg.steps);
        self.opt.update(&mut self.model.params, &grads, lr);
        self.step = step;
        Ok(StepRecord {
            step,
            loss: report.combined,
            noise_mse: report.noise_mse,
            bce_loss: report.bce_loss,
            iou_loss: report.iou_loss,
            lr,
            grad_norm,
        })
    }

    /// Samples the first `eval_count` test images with the strided sampler.
    pub fn evaluate(&self, test: &[Sample]) -> Result<EvalReport> {
        let n = self.cfg.eval_count.min(test.len());
        if n == 0 {
            return Err(Error::Data("evaluation set is empty".into()));
        }
        let keep = self.cfg.eval_stride.min(self.sched.steps);
        let opts = InferOptions {
            timesteps: Some(strided_timesteps(self.sched.steps, keep)?),
            ..InferOptions::new(self.cfg.seed)
        };
        let preds = predict(&self.model, &self.sched, &test[..n], &opts)?;
        score(&preds, &test[..n])
    }

    /// Trains until step `until` (at most `cfg.steps`), writing the log and
    /// checkpoints under `out` when given. Every record is also passed to
    /// `observe`.
    pub fn run(
        &mut self,
        train: &[Sample],
        test: &[Sample],
        out: Option<&Path>,
        until: u64,
        mut observe: impl FnMut(&LogRecord),
    ) -> Result<Vec<LogRecord>> {
        let until = until.min(self.cfg.steps);
        let mut sink = match out {
            Some(dir) => Some(LogSink::open(dir)?),
            None => None,
        };
        let mut records = Vec::new();
        let mut emit = |r: LogRecord, sink: &mut Option<LogSink>| -> Result<()> {
            if let Some(s) = sink.as_mut() {
                s.write(&r)?;
            }
            observe(&r);
            records.push(r);
            Ok(())
        };
        emit(
            LogRecord::Header {
                start_step: self.step,
                params: self.model.params.numel(),
                config: self.cfg.to_text(),
            },
            &mut sink,
        )?;
        while self.step < until {
            let rec = self.train_step(train)?;
            let s = rec.step;
            if self.cfg.log_every > 0 && (s % self.cfg.log_every == 0 || s == until) {
                emit(LogRecord::Step(rec), &mut sink)?;
            }
            if self.cfg.eval_every > 0 && s % self.cfg.eval_every == 0 {
                let rep = self.evaluate(test)?;
                let best = self.best.is_none_or(|(_, b)| rep.iou > b);
                if best {
                    self.best = Some((s, rep.iou));
                    if let Some(dir) = out {
                        self.checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
                    }
                }
                emit(
                    LogRecord::Eval(EvalRecord {
                        step: s,
                        iou: rep.iou,
                        pd: rep.pd,
                        fa: rep.fa,
                        best,
                    }),
                    &mut sink,
                )?;
            }
            if let Some(dir) = out {
                if self.cfg.checkpoint_every > 0 && s % self.cfg.checkpoint_every == 0 {
                    let path = dir.join(format!("step_{s:06}.ckpt"));
                    self.checkpoint().save(&path)?;
                    emit(
                        LogRecord::Checkpoint {
                            step: s,
                            path: path.display().to_string(),
                        },
                        &mut sink,
                    )?;
                }
            }
        }
        if let Some(dir) = out {
            let path = dir.join(LAST_CHECKPOINT);
            self.checkpoint().save(&path)?;
            emit(
                LogRecord::Checkpoint {
                    step: self.step,
                    path: path.display().to_string(),
                },
                &mut sink,
            )?;
        }
        Ok(records)
    }
}

struct LogSink {
    file: File,
}

impl LogSink {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let file = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        Ok(Self { file })
    }

    fn write(&mut self, r: &LogRecord) -> Result<()> {
        let mut line = serde_json::to_string(r)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// The `(step, iou)` of the best evaluation in a log, earliest on ties.
pub fn best_from_log(records: &[LogRecord]) -> Option<(u64, f64)> {
    records.iter().fold(None, |best, r| match r {
        LogRecord::Eval(e) if best.is_none_or(|(_, b)| e.iou > b) => Some((e.step, e.iou)),
        _ => best,
    })
}

/// Step records only.
pub fn step_records(records: &[LogRecord]) -> Vec<StepRecord> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step(s) => Some(s.clone()),
            _ => None,
        })
        .collect()
}

/// Default output root: `$IRSTD_DIFF_OUT` or `./runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("IRSTD_DIFF_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSource;
    use crate::data::{synth_dataset, SynthSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            steps: 20,
            batch: 2,
            scale_factor: 16,
            diffusion_steps: 20,
            data: DataSource::Synthetic {
                train: 8,
                test: 4,
                seed: 1,
            },
            ..TrainConfig::default()
        }
    }

    fn set() -> Vec<Sample> {
        synth_dataset(&SynthSpec::toy(8, 1)).unwrap().0
    }

    #[test]
    fn resume_is_bit_exact() {
        let data = set();
        let mut a = Trainer::new(tiny_cfg()).unwrap();
        let full: Vec<StepRecord> = (0..6).map(|_| a.train_step(&data).unwrap()).collect();

        let mut b = Trainer::new(tiny_cfg()).unwrap();
        for _ in 0..3 {
            b.train_step(&data).unwrap();
        }
        let bytes = b.checkpoint().to_bytes().unwrap();
        let mut c = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let tail: Vec<StepRecord> = (0..3).map(|_| c.train_step(&data).unwrap()).collect();
        assert_eq!(&full[3..], &tail[..]);
    }

    #[test]
    fn zero_gradients_leave_parameters_fixed() {
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let before = t.model.params.clone();
        let zeros: Vec<Tensor<f32>> = t.model.params.iter().map(|(_, _, p)| Tensor::zeros(p.shape().to_vec())).collect();
        for k in 0..3 {
            t.opt.update(&mut t.model.params, &zeros, linear_decay(t.cfg.lr, k, t.cfg.steps));
        }
        for ((_, _, a), (_, _, b)) in before.iter().zip(t.model.params.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lambda_zero_removes_the_cross_entropy_gradient() {
        let data = set();
        let refs: Vec<&Sample> = data.iter().take(2).collect();
        let mut model = IrstdDiff::new(tiny_cfg().model().unwrap(), 4).unwrap();
        let sched = tiny_cfg().schedule().unwrap();
        let gt = stack_masks(&refs);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Move off the zero-initialized heads so every path carries gradient.
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let w = model.params.get_mut(id);
            let noise = Tensor::<f32>::randn(w.shape().to_vec(), &mut rng).scale(0.05);
            w.add_assign(&noise);
        }
        let eps = Tensor::<f32>::randn(gt.shape().to_vec(), &mut rng);
        let ts = [3, 17];
        let xt = q_sample_batch(&mask_to_signal(&gt), &ts, &eps, &sched).unwrap();
        let grads = |lambda: f64, mse_only: bool| {
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let (e, prob) = model
                .forward(&p, &Var::constant(xt.clone()), &Var::constant(stack_images(&refs)), &ts)
                .unwrap();
            let loss = if mse_only {
                crate::losses::noise_mse_var(&eps, &e).unwrap()
            } else {
                combined_objective(&eps, &e, &prob, &gt, lambda).unwrap().0
            };
            let mut g = tape.backward(&loss);
            p.collect_grads(&mut g)
        };
        let zero = grads(0.0, false);
        let mse = grads(0.0, true);
        let full = grads(10.0, false);
        let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        let mut ce_moves = false;
        let mut differs = false;
        for ((n, a), (b, c)) in names.iter().zip(&zero).zip(mse.iter().zip(&full)) {
            assert_eq!(a, b, "{n}");
            if n.starts_with("ce.") {
                ce_moves |= a.data().iter().any(|&v| v != 0.0);
                differs |= a != c;
            }
        }
        assert!(ce_moves, "the encoder still learns through the fused condition");
        assert!(differs, "a positive lambda adds a cross-entropy gradient");
    }

    #[test]
    fn log_round_trip_and_best_selection() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 4,
            eval_every: 2,
            eval_count: 2,
            eval_stride: 4,
            ..tiny_cfg()
        };
        let data = set();
        let mut t = Trainer::new(cfg).unwrap();
        let recs = t.run(&data, &data, Some(dir.path()), u64::MAX, |_| {}).unwrap();
        let logged = read_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(logged, recs);
        assert_eq!(step_records(&logged).len(), 4);
        assert_eq!(best_from_log(&logged), t.best);
        let best = Checkpoint::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
        assert_eq!(Some(best.state.step), t.best.map(|b| b.0));
        assert!(dir.path().join(LAST_CHECKPOINT).is_file());
        match &logged[0] {
            LogRecord::Header { config, .. } => assert!(config.contains("T = 20\n")),
            other => panic!("expected a header, got {other:?}"),
        }
    }
}
