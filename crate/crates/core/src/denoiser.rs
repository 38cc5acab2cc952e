//! Noise-estimation U-Net with sinusoidal timestep conditioning, attention
//! at one depth and additive fusion of the conditional latent.

use irstd_nn::layers::{Conv2d, Conv2dConfig, GroupNorm, Linear, SelfAttention};
use irstd_nn::{Binding, Builder, Float, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub res_blocks: usize,
    pub heads: usize,
    /// Downsampling factors at which attention is applied.
    pub attention_ds: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DenoiserConfig {
    /// Full-width settings with the base width divided by `scale_factor`.
    /// Attention sits at downsampling factor 16 (the 16×16 stage of a 256
    /// input).
    pub fn scaled(scale_factor: usize) -> Result<Self> {
        if scale_factor == 0 || 64 % scale_factor != 0 {
            return Err(Error::Config(format!(
                "scale_factor {scale_factor} must divide the base width 64"
            )));
        }
        Ok(Self {
            base_channels: 64 / scale_factor,
            channel_mult: vec![1, 1, 2, 2, 4, 4],
            res_blocks: 2,
            heads: 4,
            attention_ds: vec![16],
            in_channels: 3,
            out_channels: 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() || self.base_channels == 0 || self.res_blocks == 0 {
            return Err(Error::Config("denoiser needs at least one stage and block".into()));
        }
        if self.out_channels != 1 {
            return Err(Error::Config("denoiser predicts a single noise channel".into()));
        }
        if self.base_channels % 2 != 0 {
            return Err(Error::Config("base width must be even for the time embedding".into()));
        }
        for (i, &m) in self.channel_mult.iter().enumerate() {
            let ds = 1 << i;
            let c = m * self.base_channels;
            if self.attention_ds.contains(&ds) && c % self.heads != 0 {
                return Err(Error::Config(format!("{c} channels not divisible by {} heads", self.heads)));
            }
        }
        let deepest = self.bottleneck_channels();
        if deepest % self.heads != 0 {
            return Err(Error::Config(format!(
                "{deepest} bottleneck channels not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels * self.channel_mult.last().copied().unwrap_or(1)
    }

    /// Total downsampling factor at the bottleneck.
    pub fn bottleneck_ds(&self) -> usize {
        1 << (self.channel_mult.len() - 1)
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }
}

/// `[sin(t ω_0) .. sin(t ω_{d/2−1}), cos(t ω_0) .. cos(t ω_{d/2−1})]` with
/// `ω_i = 10000^(−i / (d/2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding width must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 10000f64.powf(-(i as f64) / half as f64))
        .collect();
    Ok(freqs
        .iter()
        .map(|w| (t * w).sin())
        .chain(freqs.iter().map(|w| (t * w).cos()))
        .collect())
}

fn embed_batch<F: Float>(ts: &[usize], dim: usize) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(timestep_embedding(t as f64, dim)?.into_iter().map(F::lit));
    }
    Ok(Tensor::from_vec([ts.len(), dim], data))
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<F: Float>(b: &Builder<F>, cin: usize, cout: usize, tdim: usize) -> Self {
        Self {
            norm1: GroupNorm::new(&b.pp("norm1"), cin),
            conv1: Conv2d::new(&b.pp("conv1"), cin, cout, 3, Conv2dConfig::same3()),
            emb: Linear::new(&b.pp("emb"), tdim, cout),
            norm2: GroupNorm::new(&b.pp("norm2"), cout),
            conv2: Conv2d::new(
                &b.pp("conv2"),
                cout,
                cout,
                3,
                Conv2dConfig {
                    zero_init: true,
                    ..Conv2dConfig::same3()
                },
            ),
            skip: (cin != cout)
                .then(|| Conv2d::new(&b.pp("skip"), cin, cout, 1, Conv2dConfig::default())),
        }
    }

    fn forward<F: Float>(&self, p: &Binding<F>, x: &Var<F>, temb: &Var<F>) -> Var<F> {
        let h = self.conv1.forward(p, &self.norm1.forward(p, x).silu());
        let h = h.add_channel_vector(&self.emb.forward(p, &temb.silu()));
        let h = self.conv2.forward(p, &self.norm2.forward(p, &h).silu());
        let skip = match &self.skip {
            Some(c) => c.forward(p, x),
            None => x.clone(),
        };
        skip.add(&h)
    }
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: GroupNorm,
    attn: SelfAttention,
}

impl AttnBlock {
    fn new<F: Float>(b: &Builder<F>, channels: usize, heads: usize) -> Self {
        Self {
            norm: GroupNorm::new(&b.pp("norm"), channels),
            attn: SelfAttention::new(&b.pp("attn"), channels, heads, true),
        }
    }

    fn forward<F: Float>(&self, p: &Binding<F>, x: &Var<F>) -> Var<F> {
        let (b, c, h, w) = x.dims4();
        let tokens = self
            .norm
            .forward(p, x)
            .reshape([b, c, h * w])
            .permute(&[0, 2, 1]);
        let out = self
            .attn
            .forward(p, &tokens)
            .permute(&[0, 2, 1])
            .reshape([b, c, h, w]);
        x.add(&out)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Res(ResBlock),
    Attn(AttnBlock),
    Down(Conv2d),
    Up(Conv2d),
}

impl Layer {
    fn forward<F: Float>(&self, p: &Binding<F>, x: &Var<F>, temb: &Var<F>) -> Var<F> {
        match self {
            Layer::Res(r) => r.forward(p, x, temb),
            Layer::Attn(a) => a.forward(p, x),
            Layer::Down(c) => c.forward(p, x),
            Layer::Up(c) => c.forward(p, &x.upsample2x()),
        }
    }
}

/// Layers applied in sequence; each input block leaves one skip.
type Block = Vec<Layer>;

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    input_blocks: Vec<Block>,
    middle: Block,
    output_blocks: Vec<Block>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new<F: Float>(b: &Builder<F>, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let base = cfg.base_channels;
        let tdim = cfg.time_dim();
        let mut ch = base * cfg.channel_mult[0];
        let mut skips = vec![ch];
        let mut input_blocks = Vec::new();
        let mut ds = 1;
        let last = cfg.channel_mult.len() - 1;
        for (level, &mult) in cfg.channel_mult.iter().enumerate() {
            for i in 0..cfg.res_blocks {
                let bb = b.pp(format!("down{level}.{i}"));
                let out = mult * base;
                let mut block = vec![Layer::Res(ResBlock::new(&bb.pp("res"), ch, out, tdim))];
                ch = out;
                if cfg.attention_ds.contains(&ds) {
                    block.push(Layer::Attn(AttnBlock::new(&bb.pp("attn"), ch, cfg.heads)));
                }
                input_blocks.push(block);
                skips.push(ch);
            }
            if level != last {
                let conv = Conv2d::new(
                    &b.pp(format!("down{level}.sample")),
                    ch,
                    ch,
                    3,
                    Conv2dConfig {
                        stride: 2,
                        ..Conv2dConfig::same3()
                    },
                );
                input_blocks.push(vec![Layer::Down(conv)]);
                skips.push(ch);
                ds *= 2;
            }
        }
        let middle = vec![
            Layer::Res(ResBlock::new(&b.pp("mid.res1"), ch, ch, tdim)),
            Layer::Attn(AttnBlock::new(&b.pp("mid.attn"), ch, cfg.heads)),
            Layer::Res(ResBlock::new(&b.pp("mid.res2"), ch, ch, tdim)),
        ];
        let mut output_blocks = Vec::new();
        for (level, &mult) in cfg.channel_mult.iter().enumerate().rev() {
            for i in 0..=cfg.res_blocks {
                let bb = b.pp(format!("up{level}.{i}"));
                let skip = skips.pop().expect("one skip per input block");
                let out = mult * base;
                let mut block = vec![Layer::Res(ResBlock::new(&bb.pp("res"), ch + skip, out, tdim))];
                ch = out;
                if cfg.attention_ds.contains(&ds) {
                    block.push(Layer::Attn(AttnBlock::new(&bb.pp("attn"), ch, cfg.heads)));
                }
                if level != 0 && i == cfg.res_blocks {
                    block.push(Layer::Up(Conv2d::new(&bb.pp("sample"), ch, ch, 3, Conv2dConfig::same3())));
                    ds /= 2;
                }
                output_blocks.push(block);
            }
        }
        Ok(Self {
            time1: Linear::new(&b.pp("time1"), base, tdim),
            time2: Linear::new(&b.pp("time2"), tdim, tdim),
            conv_in: Conv2d::new(&b.pp("conv_in"), cfg.in_channels, base * cfg.channel_mult[0], 3, Conv2dConfig::same3()),
            input_blocks,
            middle,
            output_blocks,
            out_norm: GroupNorm::new(&b.pp("out_norm"), ch),
            conv_out: Conv2d::new(
                &b.pp("conv_out"),
                ch,
                cfg.out_channels,
                3,
                Conv2dConfig {
                    zero_init: true,
                    ..Conv2dConfig::same3()
                },
            ),
            cfg,
        })
    }

    /// Shape of the latent added at the bottleneck for an `h × w` input.
    pub fn latent_shape(&self, batch: usize, h: usize, w: usize) -> [usize; 4] {
        let ds = self.cfg.bottleneck_ds();
        [batch, self.cfg.bottleneck_channels(), h / ds, w / ds]
    }

    /// `input` is `[B, in_channels, H, W]`, `ts` holds one step per sample
    /// and `latent`, when given, is added to the encoder output.
    pub fn forward<F: Float>(
        &self,
        p: &Binding<F>,
        input: &Var<F>,
        ts: &[usize],
        latent: Option<&Var<F>>,
    ) -> Result<Var<F>> {
        let (b, c, h, w) = input.dims4();
        if c != self.cfg.in_channels {
            return Err(shape_err(format!(
                "denoiser expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let ds = self.cfg.bottleneck_ds();
        if h % ds != 0 || w % ds != 0 {
            return Err(shape_err(format!("input {h}x{w} is not divisible by {ds}")));
        }
        if ts.len() != b {
            return Err(shape_err(format!("{} timesteps for batch {b}", ts.len())));
        }
        if let Some(l) = latent {
            let want = self.latent_shape(b, h, w);
            if l.shape() != want {
                return Err(shape_err(format!("latent {:?}, expected {want:?}", l.shape())));
            }
        }
        let emb = Var::constant(embed_batch::<F>(ts, self.cfg.base_channels)?);
        let temb = self.time2.forward(p, &self.time1.forward(p, &emb).silu());

        let mut x = self.conv_in.forward(p, input);
        let mut skips = vec![x.clone()];
        for block in &self.input_blocks {
            for layer in block {
                x = layer.forward(p, &x, &temb);
            }
            skips.push(x.clone());
        }
        if let Some(l) = latent {
            x = x.add(l);
        }
        for layer in &self.middle {
            x = layer.forward(p, &x, &temb);
        }
        for block in &self.output_blocks {
            let skip = skips.pop().expect("one skip per input block");
            x = Var::cat(&[&x, &skip], 1);
            for layer in block {
                x = layer.forward(p, &x, &temb);
            }
        }
        Ok(self
            .conv_out
            .forward(p, &self.out_norm.forward(p, &x).silu()))
    }
}
