//! Low-frequency isolation in the wavelet domain.
//!
//! The features are decomposed `K` times along the approximation branch,
//! each approximation is passed through a windowed attention block, and the
//! processed approximation is folded back up with the untouched detail
//! bands. The result is projected to a residual `R`; the block returns
//! `f̂ = f − R`.

use irstd_nn::layers::{Conv2d, Conv2dConfig, LayerNorm, Linear, SelfAttention};
use irstd_nn::{Binding, Builder, Float, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::wavelet::{haar_analysis, haar_synthesis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiwConfig {
    pub levels: usize,
    pub window: usize,
    pub channels: usize,
    pub heads: usize,
}

impl LiwConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            levels: 2,
            window: 4,
            channels,
            heads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("LIW needs at least one level".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("LIW window must be positive".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} LIW channels are not divisible into {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    /// Checks a `h × w` feature plane against the level and window layout.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let unit = 1 << self.levels;
        if h % unit != 0 || w % unit != 0 {
            return Err(shape_err(format!(
                "LIW input {h}x{w} is not divisible by 2^{}",
                self.levels
            )));
        }
        for k in 1..=self.levels {
            let (hk, wk) = (h >> k, w >> k);
            let win = self.window.min(hk).min(wk);
            if hk % win != 0 || wk % win != 0 {
                return Err(shape_err(format!(
                    "window {win} does not tile the level-{k} plane {hk}x{wk}"
                )));
            }
        }
        Ok(())
    }
}

/// Non-overlapping window self-attention followed by a pointwise MLP, both
/// pre-normalized and residual.
#[derive(Debug, Clone)]
pub struct WindowBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
}

impl WindowBlock {
    pub fn new<F: Float>(b: &Builder<F>, channels: usize, heads: usize, window: usize) -> Self {
        Self {
            norm1: LayerNorm::new(&b.pp("norm1"), channels),
            attn: SelfAttention::new(&b.pp("attn"), channels, heads, false),
            norm2: LayerNorm::new(&b.pp("norm2"), channels),
            fc1: Linear::new(&b.pp("fc1"), channels, 2 * channels),
            fc2: Linear::new(&b.pp("fc2"), 2 * channels, channels),
            window,
        }
    }

    pub fn forward<F: Float>(&self, p: &Binding<F>, x: &Var<F>) -> Var<F> {
        let (b, c, h, w) = x.dims4();
        let ws = self.window.min(h).min(w);
        let (nh, nw) = (h / ws, w / ws);
        let tokens = x
            .reshape([b, c, nh, ws, nw, ws])
            .permute(&[0, 2, 4, 3, 5, 1])
            .reshape([b * nh * nw, ws * ws, c]);
        let t = tokens.add(&self.attn.forward(p, &self.norm1.forward(p, &tokens)));
        let hidden = self.fc1.forward(p, &self.norm2.forward(p, &t)).silu();
        let t = t.add(&self.fc2.forward(p, &hidden));
        t.reshape([b, nh, nw, ws, ws, c])
            .permute(&[0, 5, 1, 3, 2, 4])
            .reshape([b, c, h, w])
    }
}

/// The decomposition / restore skeleton with pluggable stages:
/// `global(k, L^k)` for `k = 1..=K`, `fold(k, ·)` after each synthesis
/// `k = K..=2`, and `head` on the final full-resolution synthesis.
/// Returns `(f̂, R)`.
pub fn liw_pipeline<F: Float>(
    f: &Var<F>,
    levels: usize,
    global: impl Fn(usize, &Var<F>) -> Var<F>,
    fold: impl Fn(usize, &Var<F>) -> Var<F>,
    head: impl Fn(&Var<F>) -> Var<F>,
) -> (Var<F>, Var<F>) {
    let c = f.dims4().1;
    let mut details = Vec::with_capacity(levels);
    let mut current = f.clone();
    for k in 1..=levels {
        let bands = haar_analysis(&current);
        details.push(bands.narrow(1, c, 3 * c));
        current = global(k, &bands.narrow(1, 0, c));
    }
    for k in (2..=levels).rev() {
        let up = haar_synthesis(&Var::cat(&[&current, &details[k - 1]], 1));
        current = fold(k, &up);
    }
    let restored = haar_synthesis(&Var::cat(&[&current, &details[0]], 1));
    let residual = head(&restored);
    (f.sub(&residual), residual)
}

#[derive(Debug, Clone)]
pub struct Liw {
    pub cfg: LiwConfig,
    blocks: Vec<WindowBlock>,
    folds: Vec<Conv2d>,
    ro: Conv2d,
}

impl Liw {
    pub fn new<F: Float>(b: &Builder<F>, cfg: LiwConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let blocks = (1..=cfg.levels)
            .map(|k| WindowBlock::new(&b.pp(format!("global{k}")), c, cfg.heads, cfg.window))
            .collect();
        let folds = (2..=cfg.levels)
            .map(|k| Conv2d::new(&b.pp(format!("fold{k}")), c, c, 3, Conv2dConfig::same3()))
            .collect();
        let ro = Conv2d::new(
            &b.pp("ro"),
            c,
            c,
            1,
            Conv2dConfig {
                zero_init: true,
                ..Conv2dConfig::default()
            },
        );
        Ok(Self {
            cfg,
            blocks,
            folds,
            ro,
        })
    }

    /// `(f̂, R)` for features `[B, C, H, W]`.
    pub fn forward<F: Float>(&self, p: &Binding<F>, f: &Var<F>) -> Result<(Var<F>, Var<F>)> {
        let (_, c, h, w) = f.dims4();
        if c != self.cfg.channels {
            return Err(shape_err(format!(
                "LIW expects {} channels, got {c}",
                self.cfg.channels
            )));
        }
        self.cfg.check_input(h, w)?;
        Ok(liw_pipeline(
            f,
            self.cfg.levels,
            |k, x| self.blocks[k - 1].forward(p, x),
            |k, x| self.folds[k - 2].forward(p, x),
            |x| self.ro.forward(p, x),
        ))
    }
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;

    use irstd_nn::{ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn build(cfg: LiwConfig) -> (ParamStore<f64>, Liw) {
        let store = RefCell::new(ParamStore::new());
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(1));
        let liw = Liw::new(&Builder::new(&store, &rng), cfg).unwrap();
        (store.into_inner(), liw)
    }

    #[test]
    fn zero_head_is_identity() {
        let (store, liw) = build(LiwConfig::new(8));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Var::constant(Tensor::<f64>::randn([2, 8, 16, 16], &mut rng));
        let (fh, r) = liw.forward(&store.bind_const(), &f).unwrap();
        assert_eq!(fh.value(), f.value());
        assert!(r.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_follow_input() {
        let (store, liw) = build(LiwConfig::new(64));
        let f = Var::constant(Tensor::<f32>::zeros([1, 64, 64, 64]));
        let store = store.cast::<f32>();
        let (fh, r) = liw.forward(&store.bind_const(), &f).unwrap();
        assert_eq!(fh.shape(), &[1, 64, 64, 64]);
        assert_eq!(r.shape(), &[1, 64, 64, 64]);
    }

    #[test]
    fn identity_stages_restore_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Var::constant(Tensor::<f64>::randn([1, 3, 16, 16], &mut rng));
        for levels in 1..=3 {
            let (fh, r) = liw_pipeline(&f, levels, |_, x| x.clone(), |_, x| x.clone(), |x| x.clone());
            assert!(r.value().max_abs_diff(f.value()) <= 1e-6);
            assert!(fh.value().data().iter().all(|v| v.abs() <= 1e-6));
        }
    }

    #[test]
    fn bad_layouts() {
        assert!(LiwConfig { levels: 0, ..LiwConfig::new(8) }.validate().is_err());
        assert!(LiwConfig { heads: 3, ..LiwConfig::new(8) }.validate().is_err());
        let cfg = LiwConfig::new(8);
        assert!(cfg.check_input(8, 16).is_ok());
        assert!(cfg.check_input(12, 12).is_err());
        assert!(cfg.check_input(10, 12).is_err());
        let wide = LiwConfig { window: 3, ..cfg };
        assert!(wide.check_input(16, 16).is_err());
        let (store, liw) = build(cfg);
        let f = Var::constant(Tensor::<f64>::zeros([1, 4, 8, 8]));
        assert!(liw.forward(&store.bind_const(), &f).is_err());
    }
}
