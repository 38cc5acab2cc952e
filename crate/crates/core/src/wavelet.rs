//! Orthonormal 2-D Haar transform.
//!
//! For each 2×2 block `[a b; c d]` (row-major) one analysis level produces
//!
//! ```text
//! L  = (a + b + c + d) / 2
//! Hv = (a + b - c - d) / 2   top rows minus bottom rows
//! Hh = (a - b + c - d) / 2   left column minus right column
//! Hd = (a - b - c + d) / 2
//! ```
//!
//! The factor 1/2 makes the transform orthonormal, so synthesis is the
//! transpose of analysis and energy is preserved exactly.
//!
//! Transforms act on the last two axes; every leading axis is a batch of
//! independent planes. The differentiable form packs the four bands along
//! the channel axis of a `[B, C, H, W]` tensor as `[L | Hv | Hh | Hd]`.

use irstd_nn::{Float, Tensor, Var};

use crate::error::{shape_err, Result};

/// One analysis level.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands<F> {
    pub low: Tensor<F>,
    pub vertical: Tensor<F>,
    pub horizontal: Tensor<F>,
    pub diagonal: Tensor<F>,
}

/// High-frequency planes of one level, in `(v, h, d)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Details<F> {
    pub vertical: Tensor<F>,
    pub horizontal: Tensor<F>,
    pub diagonal: Tensor<F>,
}

/// `levels`-deep decomposition; index 0 holds level 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid<F> {
    pub levels: usize,
    pub lows: Vec<Tensor<F>>,
    pub details: Vec<Details<F>>,
    pub base_shape: Vec<usize>,
}

impl<F: Float> WaveletPyramid<F> {
    /// The coarsest approximation `L^K`.
    pub fn coarsest(&self) -> &Tensor<F> {
        self.lows.last().expect("pyramid has at least one level")
    }

    /// Sum of squares over `L^K` and every detail plane.
    pub fn energy(&self) -> f64 {
        let sq = |t: &Tensor<F>| t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
        sq(self.coarsest())
            + self
                .details
                .iter()
                .map(|d| sq(&d.vertical) + sq(&d.horizontal) + sq(&d.diagonal))
                .sum::<f64>()
    }
}

fn analysis_plane<F: Float>(src: &[F], h: usize, w: usize, out: [&mut [F]; 4]) {
    let half = F::lit(0.5);
    let (oh, ow) = (h / 2, w / 2);
    let [l, v, hz, d] = out;
    for y in 0..oh {
        let r0 = &src[2 * y * w..(2 * y + 1) * w];
        let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
        for x in 0..ow {
            let (a, b, c, e) = (r0[2 * x], r0[2 * x + 1], r1[2 * x], r1[2 * x + 1]);
            let i = y * ow + x;
            l[i] = (a + b + c + e) * half;
            v[i] = (a + b - c - e) * half;
            hz[i] = (a - b + c - e) * half;
            d[i] = (a - b - c + e) * half;
        }
    }
}

fn synthesis_plane<F: Float>(bands: [&[F]; 4], oh: usize, ow: usize, dst: &mut [F]) {
    let half = F::lit(0.5);
    let [l, v, hz, d] = bands;
    let w = 2 * ow;
    for y in 0..oh {
        for x in 0..ow {
            let i = y * ow + x;
            let (l, v, h, d) = (l[i], v[i], hz[i], d[i]);
            dst[2 * y * w + 2 * x] = (l + v + h + d) * half;
            dst[2 * y * w + 2 * x + 1] = (l + v - h - d) * half;
            dst[(2 * y + 1) * w + 2 * x] = (l - v + h - d) * half;
            dst[(2 * y + 1) * w + 2 * x + 1] = (l - v - h + d) * half;
        }
    }
}

/// `[B, C, H, W] -> [B, 4C, H/2, W/2]` with bands packed `[L | Hv | Hh | Hd]`.
pub fn analysis_packed<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let (b, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "Haar analysis needs even sides, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let plane = oh * ow;
    let mut out = vec![F::zero(); b * 4 * c * plane];
    for n in 0..b {
        let dst = &mut out[n * 4 * c * plane..(n + 1) * 4 * c * plane];
        let (l, rest) = dst.split_at_mut(c * plane);
        let (v, rest) = rest.split_at_mut(c * plane);
        let (hz, d) = rest.split_at_mut(c * plane);
        for ch in 0..c {
            let src = &x.data()[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
            let r = ch * plane..(ch + 1) * plane;
            analysis_plane(
                src,
                h,
                w,
                [&mut l[r.clone()], &mut v[r.clone()], &mut hz[r.clone()], &mut d[r]],
            );
        }
    }
    Tensor::from_vec([b, 4 * c, oh, ow], out)
}

/// Inverse of [`analysis_packed`].
pub fn synthesis_packed<F: Float>(y: &Tensor<F>) -> Tensor<F> {
    let (b, c4, oh, ow) = y.dims4();
    assert!(c4 % 4 == 0, "packed Haar bands need a multiple of 4 channels");
    let c = c4 / 4;
    let plane = oh * ow;
    let (h, w) = (2 * oh, 2 * ow);
    let mut out = vec![F::zero(); b * c * h * w];
    for n in 0..b {
        let src = &y.data()[n * c4 * plane..(n + 1) * c4 * plane];
        for ch in 0..c {
            let band = |k: usize| &src[(k * c + ch) * plane..(k * c + ch + 1) * plane];
            let dst = &mut out[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
            synthesis_plane([band(0), band(1), band(2), band(3)], oh, ow, dst);
        }
    }
    Tensor::from_vec([b, c, h, w], out)
}

/// Differentiable analysis. The transform is orthonormal, so its
/// vector-Jacobian product is the synthesis of the incoming gradient.
pub fn haar_analysis<F: Float>(x: &Var<F>) -> Var<F> {
    let value = analysis_packed(x.value());
    Var::from_op(&[x], value, |g, _| vec![Some(synthesis_packed(g))])
}

/// Differentiable synthesis; its vector-Jacobian product is the analysis.
pub fn haar_synthesis<F: Float>(y: &Var<F>) -> Var<F> {
    let value = synthesis_packed(y.value());
    Var::from_op(&[y], value, |g, _| vec![Some(analysis_packed(g))])
}

fn as_planes<F: Float>(x: &Tensor<F>) -> Result<(Vec<usize>, Tensor<F>)> {
    if x.rank() < 2 {
        return Err(shape_err(format!("wavelet input needs rank >= 2, got {:?}", x.shape())));
    }
    let shape = x.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let n: usize = shape[..shape.len() - 2].iter().product();
    Ok((shape, x.clone().reshape([n, 1, h, w])))
}

fn with_spatial(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = h;
    s[r - 1] = w;
    s
}

/// Single-level analysis over the last two axes.
pub fn hdwt2<F: Float>(plane: &Tensor<F>) -> Result<Subbands<F>> {
    let (shape, planes) = as_planes(plane)?;
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("Haar analysis needs even sides, got {h}x{w}")));
    }
    let packed = Var::constant(analysis_packed(&planes));
    let out = with_spatial(&shape, h / 2, w / 2);
    let band = |k| packed.narrow(1, k, 1).into_value().reshape(out.clone());
    Ok(Subbands {
        low: band(0),
        vertical: band(1),
        horizontal: band(2),
        diagonal: band(3),
    })
}

/// Single-level synthesis; all four bands must share one shape.
pub fn hidwt2<F: Float>(bands: &Subbands<F>) -> Result<Tensor<F>> {
    let shape = bands.low.shape().to_vec();
    for (name, t) in [
        ("vertical", &bands.vertical),
        ("horizontal", &bands.horizontal),
        ("diagonal", &bands.diagonal),
    ] {
        if t.shape() != shape.as_slice() {
            return Err(shape_err(format!(
                "{name} band {:?} differs from low band {shape:?}",
                t.shape()
            )));
        }
    }
    let (_, l) = as_planes(&bands.low)?;
    let (n, _, oh, ow) = l.dims4();
    let parts: Vec<Var<F>> = [&bands.low, &bands.vertical, &bands.horizontal, &bands.diagonal]
        .into_iter()
        .map(|t| Var::constant(t.clone().reshape([n, 1, oh, ow])))
        .collect();
    let packed = Var::cat(&parts.iter().collect::<Vec<_>>(), 1);
    let plane = synthesis_packed(packed.value());
    Ok(plane.reshape(with_spatial(&shape, 2 * oh, 2 * ow)))
}

/// Recursive analysis of the low-frequency branch, `levels` times.
pub fn decompose<F: Float>(plane: &Tensor<F>, levels: usize) -> Result<WaveletPyramid<F>> {
    if levels == 0 {
        return Err(crate::Error::InvalidArgument("wavelet levels must be >= 1".into()));
    }
    if plane.rank() < 2 {
        return Err(shape_err("wavelet input needs rank >= 2"));
    }
    let shape = plane.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let unit = 1usize << levels;
    if h % unit != 0 || w % unit != 0 {
        return Err(shape_err(format!(
            "{h}x{w} is not divisible by 2^{levels} = {unit}"
        )));
    }
    let mut lows = Vec::with_capacity(levels);
    let mut details = Vec::with_capacity(levels);
    let mut current = plane.clone();
    for _ in 0..levels {
        let s = hdwt2(&current)?;
        details.push(Details {
            vertical: s.vertical,
            horizontal: s.horizontal,
            diagonal: s.diagonal,
        });
        current = s.low.clone();
        lows.push(s.low);
    }
    Ok(WaveletPyramid {
        levels,
        lows,
        details,
        base_shape: shape,
    })
}

/// Rebuilds the plane from `L^K` and every detail level.
pub fn reconstruct<F: Float>(pyr: &WaveletPyramid<F>) -> Result<Tensor<F>> {
    let mut current = pyr.coarsest().clone();
    for d in pyr.details.iter().rev() {
        current = hidwt2(&Subbands {
            low: current,
            vertical: d.vertical.clone(),
            horizontal: d.horizontal.clone(),
            diagonal: d.diagonal.clone(),
        })?;
    }
    Ok(current)
}
