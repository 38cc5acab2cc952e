use crate::tensor::numel;
use crate::{Float, Tensor, Var};

/// Strided copy: `out[idx] = src[sum(idx_i * src_strides[i])]` with `out`
/// laid out row-major over `out_shape`.
fn gather_strided<F: Float>(src: &[F], out_shape: &[usize], src_strides: &[usize]) -> Vec<F> {
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| src[base + j * inner_stride]));
        }
        // advance the outer multi-index
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub fn permute_tensor<F: Float>(t: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    assert_eq!(perm.len(), t.rank(), "permutation rank");
    let strides = row_major_strides(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    Tensor::from_vec(out_shape.clone(), gather_strided(t.data(), &out_shape, &src_strides))
}

fn outer_inner(shape: &[usize], dim: usize) -> (usize, usize) {
    (numel(&shape[..dim]), numel(&shape[dim + 1..]))
}

impl<F: Float> Var<F> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<F> {
        let shape = shape.into();
        let old = self.shape().to_vec();
        let value = self.value().clone().reshape(shape);
        Var::from_op(&[self], value, move |g, _| vec![Some(g.clone().reshape(old.clone()))])
    }

    pub fn permute(&self, perm: &[usize]) -> Var<F> {
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let value = permute_tensor(self.value(), perm);
        Var::from_op(&[self], value, move |g, _| vec![Some(permute_tensor(g, &inverse))])
    }

    pub fn cat(parts: &[&Var<F>], dim: usize) -> Var<F> {
        assert!(!parts.is_empty());
        let first = parts[0].shape().to_vec();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(s.len(), first.len(), "cat rank mismatch");
                for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                    assert!(i == dim || a == b, "cat shape mismatch {s:?} vs {first:?}");
                }
                s[dim]
            })
            .collect();
        let (outer, inner) = outer_inner(&first, dim);
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&sizes) {
                let chunk = sz * inner;
                data.extend_from_slice(&p.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[dim] = total;
        let value = Tensor::from_vec(shape, data);
        Var::from_op(parts, value, move |g, needs| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&sz, &need)| {
                    let start = offset;
                    offset += sz;
                    need.then(|| narrow_tensor(g, dim, start, sz))
                })
                .collect()
        })
    }

    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Var<F> {
        let full = self.shape().to_vec();
        assert!(start + len <= full[dim], "narrow out of range");
        let value = narrow_tensor(self.value(), dim, start, len);
        Var::from_op(&[self], value, move |g, _| {
            let (outer, inner) = outer_inner(&full, dim);
            let mut out = Tensor::zeros(full.clone());
            let (src_chunk, dst_chunk) = (len * inner, full[dim] * inner);
            let od = out.data_mut();
            for o in 0..outer {
                od[o * dst_chunk + start * inner..o * dst_chunk + start * inner + src_chunk]
                    .copy_from_slice(&g.data()[o * src_chunk..(o + 1) * src_chunk]);
            }
            vec![Some(out)]
        })
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&self) -> Var<F> {
        let (b, c, h, w) = self.dims4();
        let src = self.value().data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![F::zero(); b * c * oh * ow];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for y in 0..oh {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                let drow = &mut dst[y * ow..(y + 1) * ow];
                for x in 0..ow {
                    drow[x] = row[x / 2];
                }
            }
        }
        let value = Tensor::from_vec([b, c, oh, ow], out);
        Var::from_op(&[self], value, move |g, _| {
            let mut gi = vec![F::zero(); b * c * h * w];
            for (gp, dst) in g.data().chunks(oh * ow).zip(gi.chunks_mut(h * w)) {
                for y in 0..oh {
                    for x in 0..ow {
                        dst[(y / 2) * w + x / 2] += gp[y * ow + x];
                    }
                }
            }
            vec![Some(Tensor::from_vec([b, c, h, w], gi))]
        })
    }

    /// 2×2 max pooling with stride 2 of `[B, C, H, W]` (even sides).
    pub fn max_pool2x2(&self) -> Var<F> {
        let (b, c, h, w) = self.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2x2 needs even sides");
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value().data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut arg = Vec::with_capacity(b * c * oh * ow);
        for (pi, plane) in src.chunks(h * w).enumerate() {
            for y in 0..oh {
                for x in 0..ow {
                    let cands = [
                        (2 * y) * w + 2 * x,
                        (2 * y) * w + 2 * x + 1,
                        (2 * y + 1) * w + 2 * x,
                        (2 * y + 1) * w + 2 * x + 1,
                    ];
                    let mut best = cands[0];
                    for &ci in &cands[1..] {
                        if plane[ci] > plane[best] {
                            best = ci;
                        }
                    }
                    out.push(plane[best]);
                    arg.push(pi * h * w + best);
                }
            }
        }
        let value = Tensor::from_vec([b, c, oh, ow], out);
        Var::from_op(&[self], value, move |g, _| {
            let mut gi = vec![F::zero(); b * c * h * w];
            for (&a, &gv) in arg.iter().zip(g.data()) {
                gi[a] += gv;
            }
            vec![Some(Tensor::from_vec([b, c, h, w], gi))]
        })
    }
}

pub fn narrow_tensor<F: Float>(t: &Tensor<F>, dim: usize, start: usize, len: usize) -> Tensor<F> {
    let full = t.shape();
    let (outer, inner) = outer_inner(full, dim);
    let (src_chunk, dst_chunk) = (full[dim] * inner, len * inner);
    let mut data = Vec::with_capacity(outer * dst_chunk);
    for o in 0..outer {
        let base = o * src_chunk + start * inner;
        data.extend_from_slice(&t.data()[base..base + dst_chunk]);
    }
    let mut shape = full.to_vec();
    shape[dim] = len;
    Tensor::from_vec(shape, data)
}
