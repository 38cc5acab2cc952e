use crate::{Float, Tensor, Var};

/// How the affine parameters line up with a normalized chunk.
#[derive(Clone, Copy)]
enum Affine {
    /// Chunk `ci` is `per_group` runs of `run` elements sharing one channel;
    /// the first channel is `(ci % groups) * per_group`.
    Runs { run: usize, groups: usize, per_group: usize },
    /// One parameter per position in the chunk.
    Positions,
}

/// Sum with independent lanes so the compiler can vectorize it.
pub(crate) fn lane_sum<F: Float>(xs: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut it = xs.chunks_exact(8);
    for c in &mut it {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let tail: F = it.remainder().iter().copied().sum();
    acc.iter().copied().sum::<F>() + tail
}

fn lane_dot<F: Float>(xs: &[F], ys: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut xi = xs.chunks_exact(8);
    let mut yi = ys.chunks_exact(8);
    for (a, b) in (&mut xi).zip(&mut yi) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let tail: F = xi.remainder().iter().zip(yi.remainder()).map(|(&a, &b)| a * b).sum();
    acc.iter().copied().sum::<F>() + tail
}

/// Calls `f(range_in_chunk, channel)` for every stretch sharing a parameter,
/// or `f(range, usize::MAX)` once when parameters vary per position.
fn runs(layout: Affine, ci: usize, chunk: usize, mut f: impl FnMut(std::ops::Range<usize>, usize)) {
    match layout {
        Affine::Runs { run, groups, per_group } => {
            let first = (ci % groups) * per_group;
            for r in 0..per_group {
                f(r * run..(r + 1) * run, first + r);
            }
        }
        Affine::Positions => f(0..chunk, usize::MAX),
    }
}

fn normalize_chunks<F: Float>(
    x: &Var<F>,
    gamma: &Var<F>,
    beta: &Var<F>,
    chunk: usize,
    eps: f64,
    layout: Affine,
) -> Var<F> {
    let eps = F::lit(eps);
    let xv = x.value();
    let n_chunks = xv.len() / chunk;
    let count = F::lit(chunk as f64);
    let gd = gamma.value().data();
    let bd = beta.value().data();
    let mut xhat = vec![F::zero(); xv.len()];
    let mut out = vec![F::zero(); xv.len()];
    let mut inv_std = vec![F::zero(); n_chunks];
    for (ci, ((src, xh), dst)) in xv
        .data()
        .chunks(chunk)
        .zip(xhat.chunks_mut(chunk))
        .zip(out.chunks_mut(chunk))
        .enumerate()
    {
        let mean = lane_sum(src) / count;
        for (d, &s) in xh.iter_mut().zip(src) {
            *d = s - mean;
        }
        let var = lane_dot(xh, xh) / count;
        let is = F::one() / (var + eps).sqrt();
        inv_std[ci] = is;
        xh.iter_mut().for_each(|d| *d *= is);
        runs(layout, ci, chunk, |r, ch| {
            if ch == usize::MAX {
                for (((o, &h), &g), &b) in dst.iter_mut().zip(xh.iter()).zip(gd).zip(bd) {
                    *o = h * g + b;
                }
            } else {
                let (g, b) = (gd[ch], bd[ch]);
                for (o, &h) in dst[r.clone()].iter_mut().zip(&xh[r]) {
                    *o = h * g + b;
                }
            }
        });
    }
    let shape = xv.shape().to_vec();
    let value = Tensor::from_vec(shape.clone(), out);
    let gamma_v = gamma.shared_value();
    let n_affine = gamma_v.len();
    Var::from_op(&[x, gamma, beta], value, move |gy, needs| {
        let gyd = gy.data();
        let gd = gamma_v.data();
        let mut dgamma = vec![F::zero(); n_affine];
        let mut dbeta = vec![F::zero(); n_affine];
        let mut dx = needs[0].then(|| vec![F::zero(); gyd.len()]);
        let mut dxhat = vec![F::zero(); chunk];
        for ci in 0..n_chunks {
            let base = ci * chunk;
            let gyc = &gyd[base..base + chunk];
            let xh = &xhat[base..base + chunk];
            runs(layout, ci, chunk, |r, ch| {
                if ch == usize::MAX {
                    for p in r {
                        dgamma[p] += gyc[p] * xh[p];
                        dbeta[p] += gyc[p];
                        dxhat[p] = gyc[p] * gd[p];
                    }
                } else {
                    dgamma[ch] += lane_dot(&gyc[r.clone()], &xh[r.clone()]);
                    dbeta[ch] += lane_sum(&gyc[r.clone()]);
                    let g = gd[ch];
                    for (d, &v) in dxhat[r.clone()].iter_mut().zip(&gyc[r]) {
                        *d = v * g;
                    }
                }
            });
            if let Some(dx) = dx.as_mut() {
                let md = lane_sum(&dxhat) / count;
                let mdx = lane_dot(&dxhat, xh) / count;
                let is = inv_std[ci];
                for ((o, &d), &h) in dx[base..base + chunk].iter_mut().zip(&dxhat).zip(xh) {
                    *o = is * (d - md - h * mdx);
                }
            }
        }
        vec![
            dx.map(|v| Tensor::from_vec(shape.clone(), v)),
            needs[1].then(|| Tensor::from_vec([n_affine], dgamma)),
            needs[2].then(|| Tensor::from_vec([n_affine], dbeta)),
        ]
    })
}

impl<F: Float> Var<F> {
    /// Group normalization of `[B, C, ...]` with per-channel affine `[C]`.
    pub fn group_norm(&self, gamma: &Var<F>, beta: &Var<F>, groups: usize, eps: f64) -> Var<F> {
        let shape = self.shape();
        let c = shape[1];
        assert!(c % groups == 0, "group_norm: {c} channels not divisible by {groups} groups");
        assert_eq!(gamma.shape(), &[c]);
        let spatial: usize = shape[2..].iter().product();
        let per_group = c / groups;
        let layout = Affine::Runs {
            run: spatial,
            groups,
            per_group,
        };
        normalize_chunks(self, gamma, beta, per_group * spatial, eps, layout)
    }

    /// Layer normalization over the last axis with affine `[C]`.
    pub fn layer_norm(&self, gamma: &Var<F>, beta: &Var<F>, eps: f64) -> Var<F> {
        let c = *self.shape().last().expect("layer_norm on a scalar");
        assert_eq!(gamma.shape(), &[c]);
        normalize_chunks(self, gamma, beta, c, eps, Affine::Positions)
    }
}
