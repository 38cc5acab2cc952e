//! Forward noising, reverse denoising steps and the sampling loops.
//!
//! Timesteps are 1-based throughout: `t = 1..=T`, with `ᾱ_0 = 1`.

use irstd_nn::{Float, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Smallest usable chain length.
pub const MIN_STEPS: usize = 20;

/// Precomputed variance tables, stored 0-based (`betas[t - 1]` is `β_t`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// `β̃_t`; zero at `t = 1`.
    pub posterior_betas: Vec<f64>,
    pub sqrt_alpha_bars: Vec<f64>,
    pub sqrt_one_minus_alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::TimestepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_beta(&self, t: usize) -> f64 {
        self.posterior_betas[t - 1]
    }

    /// Reverse-step standard deviation, `√β̃_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.posterior_beta(t).sqrt()
    }
}

pub fn build_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < MIN_STEPS {
        return Err(Error::InvalidSchedule(format!(
            "T = {steps} is below the minimum of {MIN_STEPS} steps"
        )));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let span = (steps - 1) as f64;
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars: Vec<f64> = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let posterior_betas = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        sqrt_alpha_bars: alpha_bars.iter().map(|a| a.sqrt()).collect(),
        sqrt_one_minus_alpha_bars: alpha_bars.iter().map(|a| (1.0 - a).sqrt()).collect(),
        betas,
        alphas,
        alpha_bars,
        posterior_betas,
    })
}

fn same_shape<F: Float>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn affine<F: Float>(a: &Tensor<F>, ca: f64, b: &Tensor<F>, cb: f64) -> Tensor<F> {
    let (ca, cb) = (F::lit(ca), F::lit(cb));
    a.zip_map(b, |x, y| ca * x + cb * y)
}

/// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`.
pub fn q_sample<F: Float>(x0: &Tensor<F>, t: usize, eps: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    sched.check_t(t)?;
    same_shape(x0, eps, "q_sample")?;
    Ok(affine(
        x0,
        sched.sqrt_alpha_bars[t - 1],
        eps,
        sched.sqrt_one_minus_alpha_bars[t - 1],
    ))
}

/// Per-sample timesteps over a leading batch axis.
pub fn q_sample_batch<F: Float>(
    x0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    same_shape(x0, eps, "q_sample")?;
    if x0.rank() == 0 || x0.dim(0) != ts.len() {
        return Err(shape_err(format!(
            "{} timesteps for batch shape {:?}",
            ts.len(),
            x0.shape()
        )));
    }
    let per = x0.len() / ts.len();
    let mut out = Vec::with_capacity(x0.len());
    for (b, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let (ca, cb) = (
            F::lit(sched.sqrt_alpha_bars[t - 1]),
            F::lit(sched.sqrt_one_minus_alpha_bars[t - 1]),
        );
        let r = b * per..(b + 1) * per;
        out.extend(x0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(&x, &e)| ca * x + cb * e));
    }
    Ok(Tensor::from_vec(x0.shape().to_vec(), out))
}

/// Inverse of [`q_sample`] given the noise.
pub fn predict_x0_from_eps<F: Float>(
    xt: &Tensor<F>,
    t: usize,
    eps_hat: &Tensor<F>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    sched.check_t(t)?;
    same_shape(xt, eps_hat, "predict_x0_from_eps")?;
    let s = sched.sqrt_alpha_bars[t - 1];
    Ok(affine(xt, 1.0 / s, eps_hat, -sched.sqrt_one_minus_alpha_bars[t - 1] / s))
}

/// Mean and variance of `q(x_{t−1} | x_t, x_0)`; defined for `t ≥ 2`.
pub fn posterior_mean_variance<F: Float>(
    x0: &Tensor<F>,
    xt: &Tensor<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Tensor<F>, f64)> {
    sched.check_t(t)?;
    if t < 2 {
        return Err(Error::PosteriorAtTerminal(t));
    }
    same_shape(x0, xt, "posterior_mean_variance")?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Ok((affine(x0, c0, xt, ct), sched.posterior_beta(t)))
}

/// One reverse step `x_t -> x_{t−1}`. `z` must be absent or all zeros at `t = 1`.
pub fn p_sample_step<F: Float>(
    xt: &Tensor<F>,
    t: usize,
    eps_hat: &Tensor<F>,
    z: Option<&Tensor<F>>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    sched.check_t(t)?;
    same_shape(xt, eps_hat, "p_sample_step")?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coef = sched.beta(t) / sched.sqrt_one_minus_alpha_bars[t - 1];
    let mean = affine(xt, inv_sqrt_alpha, eps_hat, -eps_coef * inv_sqrt_alpha);
    match z {
        None => Ok(mean),
        Some(z) => {
            same_shape(xt, z, "p_sample_step noise")?;
            if t == 1 {
                if z.data().iter().any(|v| *v != F::zero()) {
                    return Err(Error::TerminalNoise);
                }
                return Ok(mean);
            }
            Ok(affine(&mean, 1.0, z, sched.sigma(t)))
        }
    }
}

/// One reverse step `x_t -> x_next` for `next < t`. Skipping steps uses the
/// step's own coefficients `α = ᾱ_t / ᾱ_next`, `β = 1 − α` and the matching
/// posterior variance; plain one-step moves are exactly [`p_sample_step`].
pub fn p_sample_jump<F: Float>(
    xt: &Tensor<F>,
    t: usize,
    next: usize,
    eps_hat: &Tensor<F>,
    z: Option<&Tensor<F>>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if next + 1 >= t {
        if next + 1 != t {
            return Err(Error::InvalidTimesteps(format!("cannot step from {t} to {next}")));
        }
        return p_sample_step(xt, t, eps_hat, z, sched);
    }
    sched.check_t(t)?;
    sched.check_t(next)?;
    same_shape(xt, eps_hat, "p_sample_jump")?;
    let alpha = sched.alpha_bar(t) / sched.alpha_bar(next);
    let beta = 1.0 - alpha;
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coef = beta / sched.sqrt_one_minus_alpha_bars[t - 1];
    let mean = affine(xt, inv_sqrt_alpha, eps_hat, -eps_coef * inv_sqrt_alpha);
    match z {
        None => Ok(mean),
        Some(z) => {
            same_shape(xt, z, "p_sample_jump noise")?;
            let var = beta * (1.0 - sched.alpha_bar(next)) / (1.0 - sched.alpha_bar(t));
            Ok(affine(&mean, 1.0, z, var.sqrt()))
        }
    }
}

/// Checks that `ts` is a strictly decreasing subsequence of `1..=T` ending at 1.
pub fn validate_timesteps(ts: &[usize], steps: usize) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidTimesteps(m));
    if ts.is_empty() {
        return bad("empty timestep list".into());
    }
    if ts.windows(2).any(|w| w[1] >= w[0]) {
        return bad(format!("not strictly decreasing: {ts:?}"));
    }
    if ts[0] > steps {
        return bad(format!("first step {} exceeds T = {steps}", ts[0]));
    }
    if *ts.last().unwrap() != 1 {
        return bad("sequence must end at t = 1".into());
    }
    Ok(())
}

/// `T, T−1, ..., 1`.
pub fn full_timesteps(steps: usize) -> Vec<usize> {
    (1..=steps).rev().collect()
}

/// `keep` evenly spaced steps from `T` down to 1, both ends included.
pub fn strided_timesteps(steps: usize, keep: usize) -> Result<Vec<usize>> {
    if keep < 2 || keep > steps {
        return Err(Error::InvalidTimesteps(format!(
            "cannot keep {keep} of {steps} steps (need 2..={steps})"
        )));
    }
    let span = (steps - 1) as f64 / (keep - 1) as f64;
    Ok((0..keep)
        .map(|i| (steps as f64 - span * i as f64).round() as usize)
        .collect())
}

/// A conditioned noise predictor `ε_θ(x_t, t | condition)`.
pub trait NoiseEstimator<F: Float> {
    type Condition;

    /// `xt` is `[B, 1, H, W]`; every sample shares the step `t`.
    fn predict_noise(&self, xt: &Tensor<F>, cond: &Self::Condition, t: usize) -> Result<Tensor<F>>;
}

/// Reverse-process trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace<F> {
    pub timesteps: Vec<usize>,
    /// `x_t` after each visited step, when requested.
    pub states: Vec<Tensor<F>>,
    /// `{0, 1}` prediction.
    pub mask: Tensor<F>,
    /// Continuous `x̂_0`, clamped to `[−1, 1]`.
    pub logits: Tensor<F>,
}

/// Where the randomness of one sampling call comes from. Image `b` of the
/// batch draws from stream `first_index + b` of a generator seeded by `seed`,
/// so results do not depend on how a dataset is split into batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSeed {
    pub seed: u64,
    pub first_index: u64,
}

impl SampleSeed {
    pub fn new(seed: u64) -> Self {
        Self { seed, first_index: 0 }
    }

    fn rng(&self, b: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.first_index + b as u64);
        rng
    }
}

pub fn binarize<F: Float>(logits: &Tensor<F>, threshold: f64) -> Tensor<F> {
    let th = F::lit(threshold);
    logits.map(|v| if v > th { F::one() } else { F::zero() })
}

fn batch_noise<F: Float>(rngs: &mut [ChaCha8Rng], per: &[usize]) -> Tensor<F> {
    let parts: Vec<Tensor<F>> = rngs.iter_mut().map(|r| Tensor::randn(per.to_vec(), r)).collect();
    Tensor::stack_batch(&parts)
}

/// Noise consistent with `x̂_0` clamped to the mask domain `[−1, 1]`.
/// Feeding it to [`p_sample_step`] yields the posterior mean around the
/// clamped estimate, which keeps small noise errors at large `t` (amplified
/// by `1/√ᾱ_t`) from pushing the chain off the data range.
pub fn clip_denoised_eps<F: Float>(
    xt: &Tensor<F>,
    t: usize,
    eps_hat: &Tensor<F>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    let x0 = predict_x0_from_eps(xt, t, eps_hat, sched)?.map(|v| v.max(-F::one()).min(F::one()));
    let s = sched.sqrt_one_minus_alpha_bars[t - 1];
    Ok(affine(xt, 1.0 / s, &x0, -sched.sqrt_alpha_bars[t - 1] / s))
}

/// Runs the reverse chain over `timesteps` (default: all `T` steps) for a
/// batch of shape `[B, 1, H, W]`.
pub fn sample_mask<F: Float, E: NoiseEstimator<F>>(
    estimator: &E,
    cond: &E::Condition,
    shape: &[usize],
    sched: &NoiseSchedule,
    timesteps: Option<&[usize]>,
    seed: SampleSeed,
    keep_states: bool,
) -> Result<SampleTrace<F>> {
    let timesteps = match timesteps {
        Some(ts) => ts.to_vec(),
        None => full_timesteps(sched.steps),
    };
    validate_timesteps(&timesteps, sched.steps)?;
    if shape.len() != 4 || shape[1] != 1 {
        return Err(shape_err(format!("sample shape must be [B, 1, H, W], got {shape:?}")));
    }
    let mut per = shape.to_vec();
    per[0] = 1;
    let mut rngs: Vec<ChaCha8Rng> = (0..shape[0]).map(|b| seed.rng(b)).collect();
    let mut x = batch_noise::<F>(&mut rngs, &per);
    let mut states = Vec::new();
    for (i, &t) in timesteps.iter().enumerate() {
        let eps_hat = clip_denoised_eps(&x, t, &estimator.predict_noise(&x, cond, t)?, sched)?;
        let next = timesteps.get(i + 1).copied().unwrap_or(0);
        if t > 1 {
            let z = batch_noise::<F>(&mut rngs, &per);
            x = p_sample_jump(&x, t, next, &eps_hat, Some(&z), sched)?;
        } else {
            x = p_sample_step(&x, t, &eps_hat, None, sched)?;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite {
                step: t as u64,
                detail: "sampler state diverged".into(),
            });
        }
        if keep_states {
            states.push(x.clone());
        }
    }
    let logits = x.map(|v| v.max(-F::one()).min(F::one()));
    Ok(SampleTrace {
        mask: binarize(&logits, 0.0),
        logits,
        timesteps,
        states,
    })
}

/// Pixel-wise mean of `n` chains with seeds `seed, seed + 1, ...`.
pub fn ensemble_sample<F: Float, E: NoiseEstimator<F>>(
    n: usize,
    estimator: &E,
    cond: &E::Condition,
    shape: &[usize],
    sched: &NoiseSchedule,
    timesteps: Option<&[usize]>,
    seed: SampleSeed,
) -> Result<SampleTrace<F>> {
    if n < 1 {
        return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
    }
    let mut first = sample_mask(estimator, cond, shape, sched, timesteps, seed, false)?;
    if n == 1 {
        return Ok(first);
    }
    let mut acc = first.logits.clone();
    for j in 1..n {
        let s = SampleSeed {
            seed: seed.seed.wrapping_add(j as u64),
            ..seed
        };
        let tr = sample_mask(estimator, cond, shape, sched, timesteps, s, false)?;
        acc.add_assign(&tr.logits);
    }
    first.logits = acc.scale(F::lit(1.0 / n as f64));
    first.mask = binarize(&first.logits, 0.0);
    Ok(first)
}

/// `{0, 1}` mask to the symmetric diffusion domain, `2m − 1`.
pub fn mask_to_signal<F: Float>(mask: &Tensor<F>) -> Tensor<F> {
    let two = F::lit(2.0);
    mask.map(|m| two * m - F::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sched() -> NoiseSchedule {
        build_linear_schedule(100, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn linear_endpoints() {
        let s = sched();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(100) - 0.02).abs() < 1e-15);
        let mid = (s.beta(50) + s.beta(51)) / 2.0;
        assert!((mid - 0.01005).abs() < 1e-12);
        assert!((s.beta(50) - 0.01).abs() < 1e-3);
        assert!(s.betas.windows(2).all(|w| w[1] >= w[0]));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(100) < s.alpha_bar(1) && s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn short_schedule_product() {
        let s = build_linear_schedule(20, 1e-4, 0.02).unwrap();
        let direct: f64 = (0..20)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 19.0))
            .product();
        assert!((s.alpha_bar(20) - direct).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules() {
        assert!(matches!(build_linear_schedule(19, 1e-4, 0.02), Err(Error::InvalidSchedule(_))));
        assert!(build_linear_schedule(100, 0.0, 0.02).is_err());
        assert!(build_linear_schedule(100, 0.02, 0.01).is_err());
        assert!(build_linear_schedule(100, 1e-4, 1.0).is_err());
    }

    #[test]
    fn schedule_identity() {
        let s = sched();
        for t in 2..=100 {
            let lhs = s.posterior_beta(t) * (1.0 - s.alpha_bar(t));
            let rhs = (1.0 - s.alpha_bar(t - 1)) * s.beta(t);
            assert!((lhs - rhs).abs() <= 1e-12);
        }
        assert_eq!(s.posterior_beta(1), 0.0);
    }

    #[test]
    fn q_sample_branches() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = Tensor::<f64>::randn([3, 4], &mut rng);
        let x0 = Tensor::<f64>::randn([3, 4], &mut rng);
        let zero = Tensor::<f64>::zeros([3, 4]);
        for t in [1, 37, 100] {
            let a = q_sample(&zero, t, &eps, &s).unwrap();
            assert_eq!(a, eps.scale(s.sqrt_one_minus_alpha_bars[t - 1]));
            let b = q_sample(&x0, t, &zero, &s).unwrap();
            assert_eq!(b, x0.scale(s.sqrt_alpha_bars[t - 1]));
        }
        assert!(matches!(q_sample(&x0, 0, &eps, &s), Err(Error::TimestepOutOfRange { .. })));
        assert!(q_sample(&x0, 101, &eps, &s).is_err());
        assert!(q_sample(&x0, 5, &Tensor::zeros([4, 3]), &s).is_err());
    }

    #[test]
    fn q_sample_batch_matches_single() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::<f64>::randn([2, 1, 2, 2], &mut rng);
        let eps = Tensor::<f64>::randn([2, 1, 2, 2], &mut rng);
        let both = q_sample_batch(&x0, &[3, 90], &eps, &s).unwrap();
        for (b, t) in [(0, 3), (1, 90)] {
            let one = q_sample(&x0.index_batch(b), t, &eps.index_batch(b), &s).unwrap();
            assert_eq!(both.index_batch(b), one);
        }
    }

    #[test]
    fn round_trip_every_step() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::randn([8, 8], &mut rng);
        let eps = Tensor::<f64>::randn([8, 8], &mut rng);
        for t in 1..=100 {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let back = predict_x0_from_eps(&xt, t, &eps, &s).unwrap();
            assert!(back.max_abs_diff(&x0) <= 1e-5);
        }
        let v = Tensor::<f64>::full([2], 0.7);
        let r = predict_x0_from_eps(&v, 10, &Tensor::zeros([2]), &s).unwrap();
        assert!((r.data()[0] - 0.7 / s.alpha_bar(10).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn moments() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::<f64>::from_vec([2], vec![1.0, -1.0]);
        let n = 10_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = Tensor::<f64>::randn([2], &mut rng);
            let x = q_sample(&x0, 50, &eps, &s).unwrap();
            for i in 0..2 {
                sum[i] += x.data()[i];
                sq[i] += x.data()[i].powi(2);
            }
        }
        let var = 1.0 - s.alpha_bar(50);
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let emp_var = sq[i] / n as f64 - mean * mean;
            let se_mean = (var / n as f64).sqrt();
            let se_var = var * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - s.alpha_bar(50).sqrt() * x0.data()[i]).abs() < 3.0 * se_mean);
            assert!((emp_var - var).abs() < 3.0 * se_var);
        }
    }

    #[test]
    fn posterior_coefficients() {
        let s = sched();
        let z = Tensor::<f64>::zeros([3]);
        assert_eq!(posterior_mean_variance(&z, &z, 5, &s).unwrap().0, z);
        let x0 = Tensor::<f64>::scalar(1.0);
        let xt = Tensor::<f64>::scalar(0.5);
        let (mu, var) = posterior_mean_variance(&x0, &xt, 2, &s).unwrap();
        let (b1, b2) = (s.beta(1), s.beta(2));
        let (ab1, ab2) = ((1.0 - b1), (1.0 - b1) * (1.0 - b2));
        let expect = ab1.sqrt() * b2 / (1.0 - ab2) + (1.0 - b2).sqrt() * (1.0 - ab1) / (1.0 - ab2) * 0.5;
        assert!((mu.data()[0] - expect).abs() < 1e-14);
        assert!((var - (1.0 - ab1) / (1.0 - ab2) * b2).abs() < 1e-12);
        assert!(matches!(
            posterior_mean_variance(&x0, &xt, 1, &s),
            Err(Error::PosteriorAtTerminal(1))
        ));
    }

    #[test]
    fn reverse_step_rules() {
        let s = sched();
        let xt = Tensor::<f64>::from_vec([2], vec![0.3, -1.2]);
        let zero = Tensor::<f64>::zeros([2]);
        let out = p_sample_step(&xt, 40, &zero, Some(&zero), &s).unwrap();
        assert_eq!(out, xt.scale(1.0 / s.alpha(40).sqrt()));

        let eps = Tensor::<f64>::from_vec([2], vec![0.5, 0.1]);
        let a = p_sample_step(&xt, 1, &eps, None, &s).unwrap();
        let b = p_sample_step(&xt, 1, &eps, Some(&zero), &s).unwrap();
        assert_eq!(a, b);
        let ones = Tensor::<f64>::ones([2]);
        assert!(matches!(p_sample_step(&xt, 1, &eps, Some(&ones), &s), Err(Error::TerminalNoise)));

        let (x, e, z) = (0.8, -0.4, 1.3);
        let got = p_sample_step(
            &Tensor::scalar(x),
            10,
            &Tensor::scalar(e),
            Some(&Tensor::scalar(z)),
            &s,
        )
        .unwrap();
        let tilde = (1.0 - s.alpha_bar(9)) / (1.0 - s.alpha_bar(10)) * s.beta(10);
        let expect = (x - s.beta(10) / (1.0 - s.alpha_bar(10)).sqrt() * e) / s.alpha(10).sqrt() + tilde.sqrt() * z;
        assert!((got.data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn noiseless_chain_is_a_product() {
        let s = sched();
        let mut x = Tensor::<f64>::scalar(0.9);
        let zero = Tensor::<f64>::scalar(0.0);
        for t in (1..=100).rev() {
            x = p_sample_step(&x, t, &zero, Some(&zero), &s).unwrap();
        }
        let gain: f64 = s.alphas.iter().map(|a| 1.0 / a.sqrt()).product();
        assert!((x.data()[0] - 0.9 * gain).abs() < 1e-12);
    }

    #[test]
    fn timestep_lists() {
        assert!(validate_timesteps(&full_timesteps(100), 100).is_ok());
        let st = strided_timesteps(100, 60).unwrap();
        assert_eq!(st.len(), 60);
        assert_eq!(st[0], 100);
        assert!(validate_timesteps(&st, 100).is_ok());
        assert_eq!(strided_timesteps(100, 100).unwrap(), full_timesteps(100));
        assert!(validate_timesteps(&[], 100).is_err());
        assert!(validate_timesteps(&[5, 5, 1], 100).is_err());
        assert!(validate_timesteps(&[5, 3], 100).is_err());
        assert!(validate_timesteps(&[101, 1], 100).is_err());
        assert!(strided_timesteps(100, 1).is_err());
    }

    #[test]
    fn clipping_only_touches_out_of_range_estimates() {
        let s = sched();
        let x0 = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![-1.0, 0.3, 5.0]);
        let eps = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![0.2, -0.4, 1.1]);
        for t in [1, 40, 100] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let clipped = clip_denoised_eps(&xt, t, &eps, &s).unwrap();
            let back = predict_x0_from_eps(&xt, t, &clipped, &s).unwrap();
            let want = [-1.0, 0.3, 1.0];
            for (b, w) in back.data().iter().zip(want) {
                assert!((b - w).abs() < 1e-9, "t {t}: {b} vs {w}");
            }
            assert!((clipped.data()[1] - eps.data()[1]).abs() < 1e-9);
        }
    }

    /// Predicts `ε` such that `x̂_0` is always `target`.
    struct Oracle;

    impl NoiseEstimator<f64> for Oracle {
        type Condition = (Tensor<f64>, NoiseSchedule);

        fn predict_noise(&self, xt: &Tensor<f64>, cond: &Self::Condition, t: usize) -> Result<Tensor<f64>> {
            let (target, s) = cond;
            let (a, b) = (s.sqrt_alpha_bars[t - 1], s.sqrt_one_minus_alpha_bars[t - 1]);
            Ok(xt.zip_map(target, |x, x0| (x - a * x0) / b))
        }
    }

    #[test]
    fn sampling_recovers_oracle_target_and_is_deterministic() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = Tensor::<f64>::from_vec(
            [2, 1, 2, 2],
            (0..8).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
        );
        let cond = (target.clone(), s.clone());
        let shape = [2, 1, 2, 2];
        let a = sample_mask(&Oracle, &cond, &shape, &s, None, SampleSeed::new(9), true).unwrap();
        assert_eq!(a.timesteps.len(), 100);
        assert_eq!(a.states.len(), 100);
        assert_eq!(a.mask, binarize(&target, 0.0));
        let b = sample_mask(&Oracle, &cond, &shape, &s, None, SampleSeed::new(9), true).unwrap();
        assert_eq!(a, b);
        let strided = strided_timesteps(100, 60).unwrap();
        let c = sample_mask(&Oracle, &cond, &shape, &s, Some(&strided), SampleSeed::new(9), false).unwrap();
        assert_eq!(c.mask, a.mask);
        assert!(sample_mask(&Oracle, &cond, &shape, &s, Some(&[3, 4]), SampleSeed::new(9), false).is_err());
    }

    #[test]
    fn batch_split_does_not_change_samples() {
        let s = sched();
        let target = Tensor::<f64>::from_vec([2, 1, 1, 2], vec![1.0, -1.0, -1.0, 1.0]);
        let both = sample_mask(&Oracle, &(target.clone(), s.clone()), &[2, 1, 1, 2], &s, None, SampleSeed::new(3), true)
            .unwrap();
        let second = sample_mask(
            &Oracle,
            &(target.index_batch(1), s.clone()),
            &[1, 1, 1, 2],
            &s,
            None,
            SampleSeed { seed: 3, first_index: 1 },
            true,
        )
        .unwrap();
        assert_eq!(both.states[10].index_batch(1), second.states[10]);
    }

    #[test]
    fn ensemble_rules() {
        let s = sched();
        let target = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, -1.0, -1.0, 1.0]);
        let cond = (target, s.clone());
        let shape = [1, 1, 2, 2];
        let single = sample_mask(&Oracle, &cond, &shape, &s, None, SampleSeed::new(4), false).unwrap();
        let one = ensemble_sample(1, &Oracle, &cond, &shape, &s, None, SampleSeed::new(4)).unwrap();
        assert_eq!(single, one);
        let three = ensemble_sample(3, &Oracle, &cond, &shape, &s, None, SampleSeed::new(4)).unwrap();
        let again = ensemble_sample(3, &Oracle, &cond, &shape, &s, None, SampleSeed::new(4)).unwrap();
        assert_eq!(three, again);
        let mut mean = single.logits.clone();
        for j in 1..3 {
            let tr = sample_mask(&Oracle, &cond, &shape, &s, None, SampleSeed::new(4 + j), false).unwrap();
            mean.add_assign(&tr.logits);
        }
        assert!(three.logits.max_abs_diff(&mean.scale(1.0 / 3.0)) < 1e-15);
        assert!(ensemble_sample(0, &Oracle, &cond, &shape, &s, None, SampleSeed::new(4)).is_err());
    }

    #[test]
    fn jumps_land_on_the_target_marginal() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng);
        let zero = Tensor::<f64>::zeros([1, 1, 3, 3]);
        // Noise-free: x_t = √ᾱ_t x0 must move to √ᾱ_next x0.
        let xt = q_sample(&x0, 80, &zero, &s).unwrap();
        let x = p_sample_jump(&xt, 80, 40, &zero, None, &s).unwrap();
        assert!(x.max_abs_diff(&x0.scale(s.alpha_bar(40).sqrt())) < 1e-12);

        let eps = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng);
        let z = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng);
        let xt = q_sample(&x0, 50, &eps, &s).unwrap();
        let a = p_sample_jump(&xt, 50, 49, &eps, Some(&z), &s).unwrap();
        assert_eq!(a, p_sample_step(&xt, 50, &eps, Some(&z), &s).unwrap());
        assert!(p_sample_jump(&xt, 50, 50, &eps, None, &s).is_err());
        assert!(p_sample_jump(&xt, 50, 0, &eps, None, &s).is_err());
    }
}
