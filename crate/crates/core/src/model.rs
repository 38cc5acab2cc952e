//! The full network: conditional encoder (with wavelet isolation) feeding a
//! noise-estimation U-Net.

use std::cell::RefCell;

use irstd_nn::{Binding, Builder, Float, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::NoiseEstimator;
use crate::encoder::{CeConfig, ConditionResult, ConditionalEncoder};
use crate::error::{shape_err, Error, Result};
use crate::liw::LiwConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub ce: CeConfig,
    pub liw: LiwConfig,
    pub liw_enabled: bool,
    pub denoiser: DenoiserConfig,
}

impl ModelConfig {
    /// Both networks at `1 / scale_factor` width.
    pub fn scaled(image_size: usize, scale_factor: usize) -> Result<Self> {
        let ce = CeConfig::scaled(scale_factor)?;
        let liw = LiwConfig::new(ce.tap_channels());
        Ok(Self {
            image_size,
            ce,
            liw,
            liw_enabled: true,
            denoiser: DenoiserConfig::scaled(scale_factor)?,
        })
    }

    /// Halvings from the half-resolution tap to the denoiser bottleneck.
    pub fn latent_halvings(&self) -> Result<usize> {
        let ds = self.denoiser.bottleneck_ds();
        if ds < 2 {
            return Err(Error::Config(
                "the denoiser must downsample at least once to meet the latent tap".into(),
            ));
        }
        Ok(ds.trailing_zeros() as usize - 1)
    }
}

#[derive(Debug, Clone)]
pub struct IrstdDiff {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub ce: ConditionalEncoder,
    pub denoiser: Denoiser,
}

/// Per-image conditioning, computed once and reused for every reverse step.
#[derive(Debug, Clone)]
pub struct Conditioned<F> {
    /// `[B, 1, H, W]` in `[0, 1]`.
    pub images: Tensor<F>,
    pub prob: Tensor<F>,
    pub latent: Tensor<F>,
}

impl IrstdDiff {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let store = RefCell::new(ParamStore::new());
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(seed));
        let b = Builder::new(&store, &rng);
        let ce = ConditionalEncoder::new(
            &b.pp("ce"),
            cfg.ce.clone(),
            cfg.liw,
            cfg.denoiser.bottleneck_channels(),
            cfg.latent_halvings()?,
        )?;
        let denoiser = Denoiser::new(&b.pp("eps"), cfg.denoiser.clone())?;
        if cfg.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        ce.check_input(&[1, 3, cfg.image_size, cfg.image_size])?;
        Ok(Self {
            cfg,
            params: store.into_inner(),
            ce,
            denoiser,
        })
    }

    fn check_images<F: Float>(&self, images: &Var<F>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(shape_err(format!("images must be [B, 1, H, W], got {s:?}")));
        }
        Ok(())
    }

    /// Conditional encoder on grayscale images `[B, 1, H, W]`.
    pub fn condition<F: Float>(&self, p: &Binding<F>, images: &Var<F>) -> Result<ConditionResult<F>> {
        self.check_images(images)?;
        let rgb = Var::cat(&[images, images, images], 1);
        self.ce.forward(p, &rgb, self.cfg.liw_enabled)
    }

    /// `ε_θ(x_t, I, P, I′, t)`.
    pub fn eps<F: Float>(
        &self,
        p: &Binding<F>,
        xt: &Var<F>,
        images: &Var<F>,
        prob: &Var<F>,
        latent: &Var<F>,
        ts: &[usize],
    ) -> Result<Var<F>> {
        if xt.shape() != images.shape() || prob.shape() != images.shape() {
            return Err(shape_err(format!(
                "x_t {:?}, image {:?} and P {:?} must agree",
                xt.shape(),
                images.shape(),
                prob.shape()
            )));
        }
        let input = Var::cat(&[xt, images, prob], 1);
        self.denoiser.forward(p, &input, ts, Some(latent))
    }

    /// Joint forward used in training: returns `(ε̂, P)`.
    pub fn forward<F: Float>(
        &self,
        p: &Binding<F>,
        xt: &Var<F>,
        images: &Var<F>,
        ts: &[usize],
    ) -> Result<(Var<F>, Var<F>)> {
        let c = self.condition(p, images)?;
        let eps = self.eps(p, xt, images, &c.prob, &c.latent, ts)?;
        Ok((eps, c.prob))
    }

    /// Inference-time conditioning with the stored parameters.
    pub fn conditioned(&self, images: &Tensor<f32>) -> Result<Conditioned<f32>> {
        let p = self.params.bind_const();
        let c = self.condition(&p, &Var::constant(images.clone()))?;
        Ok(Conditioned {
            images: images.clone(),
            prob: c.prob.into_value(),
            latent: c.latent.into_value(),
        })
    }
}

impl NoiseEstimator<f32> for IrstdDiff {
    type Condition = Conditioned<f32>;

    fn predict_noise(&self, xt: &Tensor<f32>, cond: &Conditioned<f32>, t: usize) -> Result<Tensor<f32>> {
        let p = self.params.bind_const();
        let b = xt.dim(0);
        let eps = self.eps(
            &p,
            &Var::constant(xt.clone()),
            &Var::constant(cond.images.clone()),
            &Var::constant(cond.prob.clone()),
            &Var::constant(cond.latent.clone()),
            &vec![t; b],
        )?;
        Ok(eps.into_value())
    }
}
