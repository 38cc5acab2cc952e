//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known and may
//! appear once; [`TrainConfig::to_text`] writes the canonical form back out.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{build_linear_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Where training and evaluation images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    /// Generated in memory with the toy generator.
    Synthetic { train: usize, test: usize, seed: u64 },
    /// A `root/{images,masks,splits}` directory.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    /// Diffusion step count `T`.
    pub diffusion_steps: usize,
    /// Schedule endpoints; `None` takes the standard `1e-4 .. 0.02` ramp.
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub seed: u64,
    pub scale_factor: usize,
    pub image_size: usize,
    pub clip_norm: f64,
    pub log_every: u64,
    /// Periodic test-set evaluation; 0 disables it.
    pub eval_every: u64,
    pub eval_count: usize,
    /// Timesteps visited by the periodic evaluation sampler.
    pub eval_stride: usize,
    /// Checkpoint interval; 0 keeps only the final and best checkpoints.
    pub checkpoint_every: u64,
    pub liw: bool,
    pub liw_levels: usize,
    pub liw_window: usize,
    pub liw_heads: usize,
    pub res_blocks: usize,
    pub attention_ds: usize,
    pub heads: usize,
    pub data: DataSource,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 8,
            lr: 1e-4,
            weight_decay: 0.0,
            lambda: crate::losses::DEFAULT_LAMBDA,
            diffusion_steps: 100,
            beta_start: None,
            beta_end: None,
            seed: 0,
            scale_factor: 4,
            image_size: 64,
            clip_norm: 1.0,
            log_every: 1,
            eval_every: 0,
            eval_count: 50,
            eval_stride: 20,
            checkpoint_every: 0,
            liw: true,
            liw_levels: 2,
            liw_window: 4,
            liw_heads: 4,
            res_blocks: 2,
            attention_ds: 16,
            heads: 4,
            data: DataSource::Synthetic {
                train: 200,
                test: 50,
                seed: 7,
            },
            workers: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

pub const KEYS: &[&str] = &[
    "steps",
    "batch",
    "lr",
    "weight_decay",
    "lambda",
    "T",
    "beta_start",
    "beta_end",
    "seed",
    "scale_factor",
    "image_size",
    "clip_norm",
    "log_every",
    "eval_every",
    "eval_count",
    "eval_stride",
    "checkpoint_every",
    "liw",
    "liw_levels",
    "liw_window",
    "liw_heads",
    "res_blocks",
    "attention_ds",
    "heads",
    "data",
    "synth_train",
    "synth_test",
    "synth_seed",
    "workers",
];

impl TrainConfig {
    /// Sets one key. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "T" | "diffusion_steps" => self.diffusion_steps = parse(key, value)?,
            "beta_start" => self.beta_start = Some(parse(key, value)?),
            "beta_end" => self.beta_end = Some(parse(key, value)?),
            "seed" => self.seed = parse(key, value)?,
            "scale_factor" => self.scale_factor = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_count" => self.eval_count = parse(key, value)?,
            "eval_stride" => self.eval_stride = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "liw" => self.liw = parse_bool(key, value)?,
            "liw_levels" => self.liw_levels = parse(key, value)?,
            "liw_window" => self.liw_window = parse(key, value)?,
            "liw_heads" => self.liw_heads = parse(key, value)?,
            "res_blocks" => self.res_blocks = parse(key, value)?,
            "attention_ds" => self.attention_ds = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "data" => {
                self.data = match value {
                    "synthetic" => match self.data {
                        DataSource::Synthetic { .. } => self.data.clone(),
                        DataSource::Dir(_) => DataSource::Synthetic {
                            train: 200,
                            test: 50,
                            seed: 7,
                        },
                    },
                    path => DataSource::Dir(PathBuf::from(path)),
                }
            }
            "synth_train" | "synth_test" | "synth_seed" => {
                let DataSource::Synthetic { train, test, seed } = &mut self.data else {
                    return Err(Error::Config(format!("`{key}` only applies to data = synthetic")));
                };
                match key {
                    "synth_train" => *train = parse(key, value)?,
                    "synth_test" => *test = parse(key, value)?,
                    _ => *seed = parse(key, value)?,
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: `{k}` given twice", n + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    /// Canonical text form; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>, d: f64| format!("{}", v.unwrap_or(d));
        let (bs, be) = self.betas();
        let mut lines = vec![
            format!("steps = {}", self.steps),
            format!("batch = {}", self.batch),
            format!("lr = {}", self.lr),
            format!("weight_decay = {}", self.weight_decay),
            format!("lambda = {}", self.lambda),
            format!("T = {}", self.diffusion_steps),
            format!("beta_start = {}", opt(self.beta_start, bs)),
            format!("beta_end = {}", opt(self.beta_end, be)),
            format!("seed = {}", self.seed),
            format!("scale_factor = {}", self.scale_factor),
            format!("image_size = {}", self.image_size),
            format!("clip_norm = {}", self.clip_norm),
            format!("log_every = {}", self.log_every),
            format!("eval_every = {}", self.eval_every),
            format!("eval_count = {}", self.eval_count),
            format!("eval_stride = {}", self.eval_stride),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("liw = {}", self.liw),
            format!("liw_levels = {}", self.liw_levels),
            format!("liw_window = {}", self.liw_window),
            format!("liw_heads = {}", self.liw_heads),
            format!("res_blocks = {}", self.res_blocks),
            format!("attention_ds = {}", self.attention_ds),
            format!("heads = {}", self.heads),
            format!("workers = {}", self.workers),
        ];
        match &self.data {
            DataSource::Synthetic { train, test, seed } => {
                lines.push("data = synthetic".into());
                lines.push(format!("synth_train = {train}"));
                lines.push(format!("synth_test = {test}"));
                lines.push(format!("synth_seed = {seed}"));
            }
            DataSource::Dir(p) => lines.push(format!("data = {}", p.display())),
        }
        lines.join("\n") + "\n"
    }

    /// Schedule endpoints: explicit values, or the standard `1e-4 .. 0.02`
    /// ramp whatever `T` is.
    pub fn betas(&self) -> (f64, f64) {
        (self.beta_start.unwrap_or(1e-4), self.beta_end.unwrap_or(0.02))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let (s, e) = self.betas();
        build_linear_schedule(self.diffusion_steps, s, e)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::scaled(self.image_size, self.scale_factor)?;
        m.liw_enabled = self.liw;
        m.liw.levels = self.liw_levels;
        m.liw.window = self.liw_window;
        m.liw.heads = self.liw_heads;
        m.denoiser.res_blocks = self.res_blocks;
        m.denoiser.attention_ds = vec![self.attention_ds];
        m.denoiser.heads = self.heads;
        m.liw.validate()?;
        m.denoiser.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.lambda >= 0.0 && self.clip_norm > 0.0) {
            return bad("weight_decay and lambda must be non-negative, clip_norm positive");
        }
        if self.eval_every > 0 && (self.eval_count == 0 || self.eval_stride < 2) {
            return bad("periodic evaluation needs eval_count > 0 and eval_stride >= 2");
        }
        self.schedule()?;
        self.model()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.set("lr", "3e-4").unwrap();
        cfg.set("synth_seed", "99").unwrap();
        let text = cfg.to_text();
        let back = TrainConfig::parse_text(&text).unwrap();
        assert_eq!(back.lr, 3e-4);
        assert_eq!(back.to_text(), text);
        for key in KEYS {
            assert!(text.contains(&format!("{key} = ")), "{key} missing from echo");
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::parse_text("lrr = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("`lrr`"), "{err}");
    }

    #[test]
    fn comments_duplicates_and_bad_values() {
        let cfg = TrainConfig::parse_text("# toy\nsteps = 10 # short\n\nT = 100\n").unwrap();
        assert_eq!((cfg.steps, cfg.diffusion_steps), (10, 100));
        assert!(TrainConfig::parse_text("steps = 1\nsteps = 2\n").is_err());
        assert!(TrainConfig::parse_text("steps = ten\n").is_err());
        assert!(TrainConfig::parse_text("steps = 0\n").is_err());
        assert!(TrainConfig::parse_text("T = 19\n").is_err());
        assert!(TrainConfig::parse_text("liw = maybe\n").is_err());
        assert!(TrainConfig::parse_text("data = /x\nsynth_seed = 1\n").is_err());
    }

    #[test]
    fn default_schedule_ignores_step_count() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.betas(), (1e-4, 0.02));
        cfg.diffusion_steps = 20;
        assert_eq!(cfg.betas(), (1e-4, 0.02));
        cfg.diffusion_steps = 100;
        assert!(cfg.to_text().contains("T = 100\n"));
    }
}
