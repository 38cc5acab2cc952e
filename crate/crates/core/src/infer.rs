//! Dataset-level sampling and evaluation with a trained model.

use irstd_nn::Tensor;

use crate::data::{stack_images, Sample};
use crate::diffusion::{binarize, sample_mask, NoiseSchedule, SampleSeed};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, BinaryMask, EvalReport};
use crate::model::IrstdDiff;

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    /// Visited timesteps; `None` runs the full chain.
    pub timesteps: Option<Vec<usize>>,
    pub seed: u64,
    pub ensemble: usize,
    /// Images per forward pass. Results do not depend on it.
    pub batch: usize,
}

impl InferOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            timesteps: None,
            seed,
            ensemble: 1,
            batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    /// `[H, W]` continuous output in `[−1, 1]`.
    pub logits: Tensor<f32>,
    pub mask: BinaryMask,
}

impl Prediction {
    fn from_logits(id: &str, logits: Tensor<f32>) -> Self {
        let mask = BinaryMask::from_tensor(&binarize(&logits, 0.0)).expect("binarized plane");
        Self {
            id: id.to_string(),
            logits,
            mask,
        }
    }
}

/// Logits of every ensemble member: `out[j][i]` is member `j` on image `i`.
/// Member `j` uses seed `opts.seed + j`.
pub fn member_logits(
    model: &IrstdDiff,
    sched: &NoiseSchedule,
    samples: &[Sample],
    opts: &InferOptions,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to sample".into()));
    }
    if opts.ensemble == 0 || opts.batch == 0 {
        return Err(Error::InvalidArgument("ensemble and batch must be positive".into()));
    }
    let mut out = vec![Vec::with_capacity(samples.len()); opts.ensemble];
    for (ci, chunk) in samples.chunks(opts.batch).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = stack_images(&refs);
        let cond = model.conditioned(&images)?;
        for (j, member) in out.iter_mut().enumerate() {
            let seed = SampleSeed {
                seed: opts.seed.wrapping_add(j as u64),
                first_index: (ci * opts.batch) as u64,
            };
            let trace = sample_mask(model, &cond, images.shape(), sched, opts.timesteps.as_deref(), seed, false)?;
            let (_, _, h, w) = trace.logits.dims4();
            for b in 0..chunk.len() {
                member.push(trace.logits.index_batch(b).reshape([h, w]));
            }
        }
    }
    Ok(out)
}

/// Pixel-wise mean over the first `n` members, in member order.
pub fn average_members(members: &[Vec<Tensor<f32>>], samples: &[Sample], n: usize) -> Result<Vec<Prediction>> {
    if n == 0 || n > members.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot average {n} of {} members",
            members.len()
        )));
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let logits = if n == 1 {
                members[0][i].clone()
            } else {
                let mut acc = members[0][i].clone();
                for m in &members[1..n] {
                    acc.add_assign(&m[i]);
                }
                acc.scale(1.0 / n as f32)
            };
            Prediction::from_logits(&s.id, logits)
        })
        .collect())
}

pub fn predict(
    model: &IrstdDiff,
    sched: &NoiseSchedule,
    samples: &[Sample],
    opts: &InferOptions,
) -> Result<Vec<Prediction>> {
    let members = member_logits(model, sched, samples, opts)?;
    average_members(&members, samples, opts.ensemble)
}

/// Scores predictions against the samples' masks. ROC/AUC uses the logits
/// and is skipped when they carry no ranking information.
pub fn score(preds: &[Prediction], samples: &[Sample]) -> Result<EvalReport> {
    let masks: Vec<BinaryMask> = preds.iter().map(|p| p.mask.clone()).collect();
    let gts: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
    let logits: Vec<Tensor<f32>> = preds.iter().map(|p| p.logits.clone()).collect();
    match evaluate(&masks, &gts, Some(&logits)) {
        Err(Error::UndefinedMetric(_)) => evaluate::<f32>(&masks, &gts, None),
        other => other,
    }
}
