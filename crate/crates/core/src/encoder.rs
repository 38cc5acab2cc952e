//! Conditional encoder: a six-encoder / five-decoder nest of residual
//! U-blocks producing the latent embedding `I′`, the coarse probability map
//! `P` and the features the wavelet isolation block refines.

use irstd_nn::layers::{Conv2d, Conv2dConfig, GroupNorm};
use irstd_nn::{Binding, Builder, Float, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::liw::{Liw, LiwConfig};

/// Probability clamp on the coarse map.
pub const PROB_EPS: f64 = 1e-7;

/// Number of inter-stage 2× poolings.
pub const POOLINGS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub in_c: usize,
    pub mid_c: usize,
    pub out_c: usize,
    /// `true`: the block resamples internally; `false`: dilated, fixed
    /// resolution variant.
    pub up_down: bool,
}

const fn stage(in_c: usize, mid_c: usize, out_c: usize, up_down: bool) -> StageSpec {
    StageSpec {
        in_c,
        mid_c,
        out_c,
        up_down,
    }
}

/// Full-width stage table, encoders 1..6 then decoders 5..1.
pub const ENCODER_TABLE: [StageSpec; 6] = [
    stage(3, 16, 64, true),
    stage(64, 16, 64, true),
    stage(64, 32, 128, true),
    stage(128, 32, 256, true),
    stage(256, 32, 256, false),
    stage(256, 64, 256, false),
];

pub const DECODER_TABLE: [StageSpec; 5] = [
    stage(512, 64, 256, false),
    stage(512, 32, 128, true),
    stage(256, 32, 64, true),
    stage(128, 16, 64, true),
    stage(128, 16, 64, true),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CeConfig {
    pub encoders: Vec<StageSpec>,
    /// Decoder 5 first, decoder 1 last.
    pub decoders: Vec<StageSpec>,
    pub scale_factor: usize,
}

impl CeConfig {
    /// The stage table with every channel count except the 3 image
    /// channels divided by `scale_factor`.
    pub fn scaled(scale_factor: usize) -> Result<Self> {
        if scale_factor == 0 {
            return Err(Error::Config("scale_factor must be positive".into()));
        }
        let div = |c: usize| -> Result<usize> {
            if c % scale_factor != 0 {
                return Err(Error::Config(format!(
                    "scale_factor {scale_factor} does not divide channel count {c}"
                )));
            }
            Ok(c / scale_factor)
        };
        let scale = |s: &StageSpec, first: bool| -> Result<StageSpec> {
            Ok(StageSpec {
                in_c: if first { s.in_c } else { div(s.in_c)? },
                mid_c: div(s.mid_c)?,
                out_c: div(s.out_c)?,
                up_down: s.up_down,
            })
        };
        Ok(Self {
            encoders: ENCODER_TABLE
                .iter()
                .enumerate()
                .map(|(i, s)| scale(s, i == 0))
                .collect::<Result<_>>()?,
            decoders: DECODER_TABLE
                .iter()
                .map(|s| scale(s, false))
                .collect::<Result<_>>()?,
            scale_factor,
        })
    }

    /// Checks the chaining and skip-concatenation channel contract.
    pub fn validate(&self) -> Result<()> {
        if self.encoders.len() != 6 || self.decoders.len() != 5 {
            return Err(Error::Config("expected six encoders and five decoders".into()));
        }
        for w in self.encoders.windows(2) {
            if w[1].in_c != w[0].out_c {
                return Err(Error::Config(format!(
                    "encoder chain mismatch: {} -> {}",
                    w[0].out_c, w[1].in_c
                )));
            }
        }
        let mut below = self.encoders[5].out_c;
        for (j, d) in self.decoders.iter().enumerate() {
            let skip = self.encoders[4 - j].out_c;
            if d.in_c != below + skip {
                return Err(Error::Config(format!(
                    "decoder {} expects {} channels but receives {below} + {skip}",
                    5 - j,
                    d.in_c
                )));
            }
            below = d.out_c;
        }
        Ok(())
    }

    /// Channels at the latent tap (decoder 2).
    pub fn tap_channels(&self) -> usize {
        self.decoders[3].out_c
    }
}

/// Conv → GroupNorm → ReLU.
#[derive(Debug, Clone)]
struct ConvNormAct {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNormAct {
    fn new<F: Float>(b: &Builder<F>, cin: usize, cout: usize, dilation: usize) -> Self {
        let cfg = Conv2dConfig {
            padding: dilation,
            dilation,
            ..Conv2dConfig::default()
        };
        Self {
            conv: Conv2d::new(&b.pp("conv"), cin, cout, 3, cfg),
            norm: GroupNorm::new(&b.pp("norm"), cout),
        }
    }

    fn forward<F: Float>(&self, p: &Binding<F>, x: &Var<F>) -> Var<F> {
        self.norm.forward(p, &self.conv.forward(p, x)).relu()
    }
}

/// Two-level residual U-block.
#[derive(Debug, Clone)]
struct ResidualUBlock {
    spec: StageSpec,
    conv_in: ConvNormAct,
    enc1: ConvNormAct,
    enc2: ConvNormAct,
    bottom: ConvNormAct,
    dec2: ConvNormAct,
    dec1: ConvNormAct,
}

impl ResidualUBlock {
    fn new<F: Float>(b: &Builder<F>, spec: StageSpec) -> Self {
        let StageSpec {
            in_c, mid_c, out_c, ..
        } = spec;
        let (d1, d2, d3) = if spec.up_down { (1, 1, 2) } else { (1, 2, 4) };
        Self {
            spec,
            conv_in: ConvNormAct::new(&b.pp("conv_in"), in_c, out_c, 1),
            enc1: ConvNormAct::new(&b.pp("enc1"), out_c, mid_c, d1),
            enc2: ConvNormAct::new(&b.pp("enc2"), mid_c, mid_c, d2),
            bottom: ConvNormAct::new(&b.pp("bottom"), mid_c, mid_c, d3),
            dec2: ConvNormAct::new(&b.pp("dec2"), 2 * mid_c, mid_c, d2),
            dec1: ConvNormAct::new(&b.pp("dec1"), 2 * mid_c, out_c, d1),
        }
    }

    fn forward<F: Float>(&self, p: &Binding<F>, x: &Var<F>) -> Var<F> {
        let hx_in = self.conv_in.forward(p, x);
        let h1 = self.enc1.forward(p, &hx_in);
        let down = if self.spec.up_down { h1.max_pool2x2() } else { h1.clone() };
        let h2 = self.enc2.forward(p, &down);
        let h3 = self.bottom.forward(p, &h2);
        let d2 = self.dec2.forward(p, &Var::cat(&[&h3, &h2], 1));
        let up = if self.spec.up_down { d2.upsample2x() } else { d2 };
        let d1 = self.dec1.forward(p, &Var::cat(&[&up, &h1], 1));
        d1.add(&hx_in)
    }
}

/// Outputs of the conditional encoder.
#[derive(Debug, Clone)]
pub struct ConditionResult<F: Float> {
    /// `I′` at the denoiser bottleneck shape.
    pub latent: Var<F>,
    /// `P`, `[B, 1, H, W]`, strictly inside `(0, 1)`.
    pub prob: Var<F>,
    /// Tap features before wavelet isolation.
    pub features: Var<F>,
    /// Tap features after wavelet isolation (equal to `features` when it is
    /// disabled).
    pub enhanced: Var<F>,
}

#[derive(Debug, Clone)]
pub struct ConditionalEncoder {
    pub cfg: CeConfig,
    encoders: Vec<ResidualUBlock>,
    decoders: Vec<ResidualUBlock>,
    liw: Liw,
    head: Conv2d,
    latent: Vec<Conv2d>,
    pub latent_channels: usize,
    pub latent_halvings: usize,
}

impl ConditionalEncoder {
    /// `latent_halvings` strided projections map the half-resolution tap to
    /// `latent_channels` at `H / 2^(1 + latent_halvings)`.
    pub fn new<F: Float>(
        b: &Builder<F>,
        cfg: CeConfig,
        liw: LiwConfig,
        latent_channels: usize,
        latent_halvings: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if liw.channels != cfg.tap_channels() {
            return Err(Error::Config(format!(
                "LIW channels {} differ from the tap's {}",
                liw.channels,
                cfg.tap_channels()
            )));
        }
        let encoders = cfg
            .encoders
            .iter()
            .enumerate()
            .map(|(i, s)| ResidualUBlock::new(&b.pp(format!("enc{}", i + 1)), *s))
            .collect();
        let decoders = cfg
            .decoders
            .iter()
            .enumerate()
            .map(|(j, s)| ResidualUBlock::new(&b.pp(format!("dec{}", 5 - j)), *s))
            .collect();
        let tap = cfg.tap_channels();
        let latent = (0..latent_halvings.max(1))
            .map(|i| {
                let cin = if i == 0 { tap } else { latent_channels };
                let stride = if latent_halvings == 0 { 1 } else { 2 };
                Conv2d::new(
                    &b.pp(format!("latent{i}")),
                    cin,
                    latent_channels,
                    1,
                    Conv2dConfig {
                        stride,
                        ..Conv2dConfig::default()
                    },
                )
            })
            .collect();
        Ok(Self {
            head: Conv2d::new(&b.pp("head"), cfg.decoders[4].out_c, 1, 1, Conv2dConfig::default()),
            liw: Liw::new(&b.pp("liw"), liw)?,
            cfg,
            encoders,
            decoders,
            latent,
            latent_channels,
            latent_halvings,
        })
    }

    pub fn liw(&self) -> &Liw {
        &self.liw
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let unit = 1 << POOLINGS;
        if shape.len() != 4 || shape[1] != self.cfg.encoders[0].in_c {
            return Err(shape_err(format!(
                "encoder input must be [B, {}, H, W], got {shape:?}",
                self.cfg.encoders[0].in_c
            )));
        }
        if shape[2] % unit != 0 || shape[3] % unit != 0 {
            return Err(shape_err(format!(
                "encoder input {}x{} is not divisible by {unit}",
                shape[2], shape[3]
            )));
        }
        let (th, tw) = (shape[2] / 2, shape[3] / 2);
        self.liw.cfg.check_input(th, tw)?;
        let unit = 1 << self.latent_halvings;
        if th % unit != 0 || tw % unit != 0 {
            return Err(shape_err(format!(
                "tap {th}x{tw} cannot be halved {} times",
                self.latent_halvings
            )));
        }
        Ok(())
    }

    /// `image` is `[B, 3, H, W]`.
    pub fn forward<F: Float>(
        &self,
        p: &Binding<F>,
        image: &Var<F>,
        liw_enabled: bool,
    ) -> Result<ConditionResult<F>> {
        self.check_input(image.shape())?;
        let mut skips = Vec::with_capacity(6);
        let mut x = image.clone();
        for (i, e) in self.encoders.iter().enumerate() {
            if i > 0 {
                x = x.max_pool2x2();
            }
            x = e.forward(p, &x);
            skips.push(x.clone());
        }
        let mut features = None;
        let mut enhanced = None;
        for (j, d) in self.decoders.iter().enumerate() {
            let skip = &skips[4 - j];
            let below = x.upsample2x();
            x = d.forward(p, &Var::cat(&[&below, skip], 1));
            if j == 3 {
                features = Some(x.clone());
                if liw_enabled {
                    x = self.liw.forward(p, &x)?.0;
                }
                enhanced = Some(x.clone());
            }
        }
        let enhanced = enhanced.expect("tap stage visited");
        let mut latent = enhanced.clone();
        for (i, conv) in self.latent.iter().enumerate() {
            if i > 0 {
                latent = latent.silu();
            }
            latent = conv.forward(p, &latent);
        }
        let prob = self
            .head
            .forward(p, &x)
            .sigmoid()
            .clamp(PROB_EPS, 1.0 - PROB_EPS);
        Ok(ConditionResult {
            latent,
            prob,
            features: features.expect("tap stage visited"),
            enhanced,
        })
    }
}
