use crate::{Float, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

#[derive(Clone, Copy)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    g: ConvGeometry,
}

impl Dims {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.g.stride == 1 && self.g.padding == 0
    }

    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.oh * self.ow
    }

    /// Valid output-column range for kernel column offset `j`.
    fn col_range(&self, j: usize) -> (usize, usize) {
        let (s, p, d) = (self.g.stride as isize, self.g.padding as isize, self.g.dilation as isize);
        let off = j as isize * d - p;
        // need 0 <= ox*s + off < w
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (self.w as isize - 1 - off).div_euclid(s) + 1;
        let lo = lo.clamp(0, self.ow as isize) as usize;
        let hi = hi.clamp(0, self.ow as isize) as usize;
        (lo, hi.max(lo))
    }

    fn src_row(&self, oy: usize, i: usize) -> Option<usize> {
        let iy = (oy * self.g.stride + i * self.g.dilation) as isize - self.g.padding as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Unfolds one image into rows of `so` entries spaced `ld` apart.
fn im2col<F: Float>(x: &[F], d: &Dims, col: &mut [F], ld: usize) {
    let so = d.spatial_out();
    let s = d.g.stride;
    for c in 0..d.c {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = ((c * d.kh + i) * d.kw + j) * ld;
                let dst = &mut col[row..row + so];
                let (lo, hi) = d.col_range(j);
                let off = (j * d.g.dilation) as isize - d.g.padding as isize;
                for oy in 0..d.oh {
                    let drow = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    match d.src_row(oy, i) {
                        None => drow.fill(F::zero()),
                        Some(iy) => {
                            drow[..lo].fill(F::zero());
                            drow[hi..].fill(F::zero());
                            let src = &plane[iy * d.w..(iy + 1) * d.w];
                            if hi == lo {
                                continue;
                            }
                            if s == 1 {
                                let start = (lo as isize + off) as usize;
                                drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                            } else {
                                for ox in lo..hi {
                                    drow[ox] = src[(ox as isize * s as isize + off) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(col: &[F], d: &Dims, dx: &mut [F], ld: usize) {
    let so = d.spatial_out();
    let s = d.g.stride;
    for c in 0..d.c {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = ((c * d.kh + i) * d.kw + j) * ld;
                let srcc = &col[row..row + so];
                let (lo, hi) = d.col_range(j);
                let off = (j * d.g.dilation) as isize - d.g.padding as isize;
                for oy in 0..d.oh {
                    if let Some(iy) = d.src_row(oy, i) {
                        let crow = &srcc[oy * d.ow..(oy + 1) * d.ow];
                        let prow = &mut plane[iy * d.w..(iy + 1) * d.w];
                        if hi == lo {
                            continue;
                        }
                        if s == 1 {
                            let start = (lo as isize + off) as usize;
                            for (p, &v) in prow[start..start + (hi - lo)].iter_mut().zip(&crow[lo..hi]) {
                                *p += v;
                            }
                        } else {
                            for ox in lo..hi {
                                prow[(ox as isize * s as isize + off) as usize] += crow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<F: Float> Var<F> {
    /// 2-D convolution of `[B, C, H, W]` with weights `[O, C, kh, kw]`.
    pub fn conv2d(&self, weight: &Var<F>, bias: Option<&Var<F>>, g: ConvGeometry) -> Var<F> {
        let (b, c, h, w) = self.dims4();
        let (o, wc, kh, kw) = weight.dims4();
        assert_eq!(c, wc, "conv2d input channels {c} vs weight {wc}");
        assert!(g.stride >= 1 && g.dilation >= 1);
        let eff_h = g.dilation * (kh - 1) + 1;
        let eff_w = g.dilation * (kw - 1) + 1;
        assert!(h + 2 * g.padding >= eff_h && w + 2 * g.padding >= eff_w, "conv2d kernel larger than input");
        let oh = (h + 2 * g.padding - eff_h) / g.stride + 1;
        let ow = (w + 2 * g.padding - eff_w) / g.stride + 1;
        let d = Dims { c, h, w, kh, kw, oh, ow, g };
        if let Some(bv) = bias {
            assert_eq!(bv.shape(), &[o], "conv2d bias shape");
        }

        let (ck, so) = (d.ck(), d.spatial_out());
        // Small planes are unfolded several images at a time so each GEMM
        // has a reasonably wide right-hand side.
        let group = (GEMM_COLUMNS / so).clamp(1, b);
        let xv = self.value().data();
        let wv = weight.value().data();
        let mut out = vec![F::zero(); b * o * so];
        let mut col = vec![F::zero(); ck * group * so];
        let mut tmp = vec![F::zero(); if group > 1 { o * group * so } else { 0 }];
        for n0 in (0..b).step_by(group) {
            let g = group.min(b - n0);
            let ld = g * so;
            let colr: &[F] = if d.is_pointwise() && g == 1 {
                &xv[n0 * c * h * w..(n0 + 1) * c * h * w]
            } else {
                unfold(xv, &d, n0, g, &mut col);
                &col
            };
            let dst: &mut [F] = if g == 1 { &mut out[n0 * o * so..(n0 + 1) * o * so] } else { &mut tmp };
            if let Some(bv) = bias {
                for (oc, chunk) in dst.chunks_mut(ld).take(o).enumerate() {
                    chunk.fill(bv.value().data()[oc]);
                }
            }
            let beta = if bias.is_some() { F::one() } else { F::zero() };
            F::gemm(o, ck, ld, F::one(), wv, (ck as isize, 1), colr, (ld as isize, 1), beta, dst, (ld as isize, 1));
            if g > 1 {
                // [o, g, so] -> [g, o, so]
                for k in 0..g {
                    for oc in 0..o {
                        let src = &tmp[oc * ld + k * so..oc * ld + (k + 1) * so];
                        let at = ((n0 + k) * o + oc) * so;
                        out[at..at + so].copy_from_slice(src);
                    }
                }
            }
        }
        let value = Tensor::from_vec([b, o, oh, ow], out);

        let (xs, ws) = (self.shared_value(), weight.shared_value());
        let mut inputs = vec![self, weight];
        if let Some(bv) = bias {
            inputs.push(bv);
        }
        Var::from_op(&inputs, value, move |gy, needs| {
            let gyd = gy.data();
            let xv = xs.data();
            let wv = ws.data();
            let mut dx = needs[0].then(|| vec![F::zero(); b * c * h * w]);
            let mut dw = needs[1].then(|| vec![F::zero(); o * ck]);
            let mut col = vec![F::zero(); if dw.is_some() { ck * group * so } else { 0 }];
            let mut dcol = vec![F::zero(); if dx.is_some() { ck * group * so } else { 0 }];
            let mut gyg = vec![F::zero(); if group > 1 { o * group * so } else { 0 }];
            for n0 in (0..b).step_by(group) {
                let g = group.min(b - n0);
                let ld = g * so;
                let gyn: &[F] = if g == 1 {
                    &gyd[n0 * o * so..(n0 + 1) * o * so]
                } else {
                    for k in 0..g {
                        for oc in 0..o {
                            let at = ((n0 + k) * o + oc) * so;
                            gyg[oc * ld + k * so..oc * ld + (k + 1) * so].copy_from_slice(&gyd[at..at + so]);
                        }
                    }
                    &gyg
                };
                if let Some(dw) = dw.as_mut() {
                    let colr: &[F] = if d.is_pointwise() && g == 1 {
                        &xv[n0 * c * h * w..(n0 + 1) * c * h * w]
                    } else {
                        unfold(xv, &d, n0, g, &mut col);
                        &col
                    };
                    // dW += dY · colᵀ
                    F::gemm(o, ld, ck, F::one(), gyn, (ld as isize, 1), colr, (1, ld as isize), F::one(), dw, (ck as isize, 1));
                }
                if let Some(dx) = dx.as_mut() {
                    if d.is_pointwise() && g == 1 {
                        let dxn = &mut dx[n0 * c * h * w..(n0 + 1) * c * h * w];
                        F::gemm(ck, o, so, F::one(), wv, (1, ck as isize), gyn, (so as isize, 1), F::zero(), dxn, (so as isize, 1));
                    } else {
                        F::gemm(ck, o, ld, F::one(), wv, (1, ck as isize), gyn, (ld as isize, 1), F::zero(), &mut dcol, (ld as isize, 1));
                        for k in 0..g {
                            let n = n0 + k;
                            let dxn = &mut dx[n * c * h * w..(n + 1) * c * h * w];
                            if d.is_pointwise() {
                                for ch in 0..c {
                                    dxn[ch * so..(ch + 1) * so].copy_from_slice(&dcol[ch * ld + k * so..ch * ld + (k + 1) * so]);
                                }
                            } else {
                                col2im(&dcol[k * so..], &d, dxn, ld);
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                dx.map(|v| Tensor::from_vec([b, c, h, w], v)),
                dw.map(|v| Tensor::from_vec([o, c, kh, kw], v)),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut db = vec![F::zero(); o];
                    for (i, chunk) in gyd.chunks(so).enumerate() {
                        db[i % o] += chunk.iter().copied().sum();
                    }
                    Tensor::from_vec([o], db)
                }));
            }
            grads
        })
    }
}

/// Target width of the right-hand side of a convolution GEMM.
const GEMM_COLUMNS: usize = 4096;

/// Unfolds images `n0 .. n0 + g` side by side into `col`, which holds
/// `ck` rows of `g * so` entries.
fn unfold<F: Float>(x: &[F], d: &Dims, n0: usize, g: usize, col: &mut [F]) {
    let (chw, so) = (d.c * d.h * d.w, d.spatial_out());
    let ld = g * so;
    for k in 0..g {
        let xn = &x[(n0 + k) * chw..(n0 + k + 1) * chw];
        if d.is_pointwise() {
            for ch in 0..d.c {
                col[ch * ld + k * so..ch * ld + (k + 1) * so].copy_from_slice(&xn[ch * so..(ch + 1) * so]);
            }
        } else {
            im2col(xn, d, &mut col[k * so..], ld);
        }
    }
}
