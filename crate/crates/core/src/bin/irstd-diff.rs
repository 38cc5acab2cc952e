use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irstd_diff::commands::{self, SampleArgs, SweepAxis};
use irstd_diff::config::TrainConfig;
use irstd_diff::trainer::default_out_root;
use irstd_diff::{Error, Result};

/// Conditional diffusion for infrared small-target segmentation.
#[derive(Debug, Parser)]
#[command(name = "irstd-diff", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: $IRSTD_DIFF_OUT/<command>, else runs/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training steps.
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Number of visited sampling steps (strided sampling).
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Ensemble size when sampling.
    #[arg(long, global = true)]
    ensemble: Option<usize>,
    #[arg(long, global = true)]
    scale_factor: Option<usize>,
    /// Reference CPU mode. Every run already is, so the flag only exists for
    /// script compatibility.
    #[arg(long, global = true)]
    device_free: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; trailing `key=value` pairs override the config.
    Train {
        overrides: Vec<String>,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step (the schedule still follows `steps`).
        #[arg(long)]
        until: Option<u64>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Sample masks for a split with a trained checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Dataset root; defaults to the data the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score predicted masks against ground truth with matching file names.
    Evaluate { pred: PathBuf, gt: PathBuf },
    /// Loss response to a missed target versus a few false-alarm pixels.
    Analyze {
        resolution: usize,
        batch: usize,
        target_px: usize,
        fp_px: usize,
        fp_conf: f64,
    },
    /// Compare values along one axis: k, T, stride or ensemble.
    Sweep {
        axis: SweepAxis,
        #[arg(value_delimiter = ',', num_args = 0..)]
        values: Vec<usize>,
        /// Trained model for stride and ensemble sweeps.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config overrides for k and T sweeps.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Render report.json files as ROC curves and train_log.jsonl files as
    /// loss curves.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write a synthetic dataset in the on-disk layout.
    Synth {
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
}

impl Global {
    fn out(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| default_out_root().join(command))
    }

    fn train_config(&self, overrides: &[String]) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(s) = self.scale_factor {
            cfg.scale_factor = s;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.cmd {
        Command::Train {
            overrides,
            resume,
            until,
            quiet,
        } => {
            let cfg = g.train_config(overrides)?;
            print!("{}", commands::cmd_train(cfg, &g.out("train"), resume.as_deref(), *until, !quiet)?);
        }
        Command::Sample { checkpoint, split, data } => {
            let args = SampleArgs {
                checkpoint: checkpoint.clone(),
                data: data.clone(),
                split: split.clone(),
                stride: g.stride,
                ensemble: g.ensemble.unwrap_or(1),
                seed: g.seed.unwrap_or(0),
            };
            print!("{}", commands::cmd_sample(&args, &g.out("sample"))?);
        }
        Command::Evaluate { pred, gt } => {
            print!("{}", commands::cmd_evaluate(pred, gt, &g.out("evaluate"))?.1);
        }
        Command::Analyze {
            resolution,
            batch,
            target_px,
            fp_px,
            fp_conf,
        } => {
            let out = g.out.as_deref();
            print!(
                "{}",
                commands::cmd_analyze(*resolution, *batch, *target_px, *fp_px, *fp_conf, out)?
            );
        }
        Command::Sweep {
            axis,
            values,
            checkpoint,
            overrides,
        } => {
            let cfg = g.train_config(overrides)?;
            let seed = g.seed.unwrap_or(0);
            let (_, table) = commands::cmd_sweep(*axis, values, &cfg, checkpoint.as_deref(), seed, &g.out("sweep"))?;
            print!("{table}");
        }
        Command::Plot { inputs } => {
            for p in commands::cmd_plot(inputs, &g.out("plot"))? {
                println!("{}", p.display());
            }
        }
        Command::Synth {
            train,
            test,
            resolution,
        } => {
            let out: &Path = &g.out("synth");
            print!("{}", commands::cmd_synth(*train, *test, g.seed.unwrap_or(7), *resolution, out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
