//! Parameterized layers. Each layer stores [`ParamId`]s and reads the live
//! values from a [`Binding`] at forward time.

use crate::ops::conv::ConvGeometry;
use crate::params::{Binding, Builder, Init, ParamId};
use crate::{Float, Var};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
    pub zero_init: bool,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: true,
            zero_init: false,
        }
    }
}

impl Conv2dConfig {
    /// Same-size 3×3 convolution.
    pub fn same3() -> Self {
        Self {
            padding: 1,
            ..Self::default()
        }
    }
}

impl Conv2d {
    pub fn new<F: Float>(b: &Builder<F>, cin: usize, cout: usize, k: usize, cfg: Conv2dConfig) -> Self {
        let fan_in = cin * k * k;
        let init = if cfg.zero_init { Init::Zeros } else { Init::FanInUniform { fan_in } };
        let weight = b.param("weight", &[cout, cin, k, k], init);
        let bias = cfg.bias.then(|| b.param("bias", &[cout], init));
        Self {
            weight,
            bias,
            geometry: ConvGeometry {
                stride: cfg.stride,
                padding: cfg.padding,
                dilation: cfg.dilation,
            },
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward<F: Float>(&self, p: &Binding<F>, x: &Var<F>) -> Var<F> {
        x.conv2d(p.var(self.weight), self.bias.map(|b| p.var(b)), self.geometry)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Float>(b: &Builder<F>, fin: usize, fout: usize) -> Self {
        let init = Init::FanInUniform { fan_in: fin };
        Self {
            weight: b.param("weight", &[fout, fin], init),
            bias: b.param("bias", &[fout], init),
        }
    }

    pub fn zeroed<F: Float>(b: &Builder<F>, fin: usize, fout: usize) -> Self {
        Self {
            weight: b.param("weight", &[fout, fin], Init::Zeros),
            bias: b.param("bias", &[fout], Init::Zeros),
        }
    }

    pub fn forward<F: Float>(&self, p: &Binding<F>, x: &Var<F>) -> Var<F> {
        x.linear(p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Largest power-of-two group count up to 32 that leaves at least two
/// channels per group.
pub fn norm_groups(channels: usize) -> usize {
    [32, 16, 8, 4, 2]
        .into_iter()
        .find(|&g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<F: Float>(b: &Builder<F>, channels: usize) -> Self {
        Self {
            gamma: b.param("gamma", &[channels], Init::Ones),
            beta: b.param("beta", &[channels], Init::Zeros),
            groups: norm_groups(channels),
        }
    }

    pub fn forward<F: Float>(&self, p: &Binding<F>, x: &Var<F>) -> Var<F> {
        x.group_norm(p.var(self.gamma), p.var(self.beta), self.groups, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(b: &Builder<F>, width: usize) -> Self {
        Self {
            gamma: b.param("gamma", &[width], Init::Ones),
            beta: b.param("beta", &[width], Init::Zeros),
        }
    }

    pub fn forward<F: Float>(&self, p: &Binding<F>, x: &Var<F>) -> Var<F> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), 1e-5)
    }
}

/// Multi-head self-attention over token sequences `[N, L, C]`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    width: usize,
}

impl SelfAttention {
    pub fn new<F: Float>(b: &Builder<F>, width: usize, heads: usize, zero_proj: bool) -> Self {
        assert!(heads >= 1 && width % heads == 0, "{width} channels not divisible by {heads} heads");
        let proj = if zero_proj {
            Linear::zeroed(&b.pp("proj"), width, width)
        } else {
            Linear::new(&b.pp("proj"), width, width)
        };
        Self {
            qkv: Linear::new(&b.pp("qkv"), width, 3 * width),
            proj,
            heads,
            width,
        }
    }

    pub fn forward<F: Float>(&self, p: &Binding<F>, x: &Var<F>) -> Var<F> {
        let shape = x.shape().to_vec();
        let (n, l, c) = (shape[0], shape[1], shape[2]);
        assert_eq!(c, self.width);
        let (h, d) = (self.heads, c / self.heads);
        // [N, L, 3, H, D] -> [3, N, H, L, D]
        let qkv = self
            .qkv
            .forward(p, x)
            .reshape([n, l, 3, h, d])
            .permute(&[2, 0, 3, 1, 4])
            .reshape([3, n * h, l, d]);
        let q = qkv.narrow(0, 0, 1).reshape([n * h, l, d]);
        let k = qkv.narrow(0, 1, 1).reshape([n * h, l, d]);
        let v = qkv.narrow(0, 2, 1).reshape([n * h, l, d]);
        let attn = q
            .matmul_ext(&k, true)
            .scale(1.0 / (d as f64).sqrt())
            .softmax_last();
        let out = attn
            .matmul(&v)
            .reshape([n, h, l, d])
            .permute(&[0, 2, 1, 3])
            .reshape([n, l, c]);
        self.proj.forward(p, &out)
    }
}
