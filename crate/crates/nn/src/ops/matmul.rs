use crate::{Float, Tensor, Var};

fn batch_dims(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => panic!("matmul expects rank 2 or 3, got {shape:?}"),
    }
}

impl<F: Float> Var<F> {
    /// Batched `self · other` (or `self · otherᵀ` when `transpose_rhs`).
    /// Both operands share the leading batch axis when rank 3.
    pub fn matmul_ext(&self, other: &Var<F>, transpose_rhs: bool) -> Var<F> {
        let (ba, m, k) = batch_dims(self.shape());
        let (bb, r1, r2) = batch_dims(other.shape());
        assert_eq!(ba, bb, "matmul batch mismatch");
        let (kb, n) = if transpose_rhs { (r2, r1) } else { (r1, r2) };
        assert_eq!(k, kb, "matmul inner dims {:?} x {:?}", self.shape(), other.shape());
        let bs = ba;
        // strides of the (k×n) view of `other`
        let b_strides = if transpose_rhs { (1, k as isize) } else { (n as isize, 1) };
        let av = self.value().data();
        let bv = other.value().data();
        let mut out = vec![F::zero(); bs * m * n];
        for i in 0..bs {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                &av[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &bv[i * k * n..(i + 1) * k * n],
                b_strides,
                F::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        let out_shape = if self.shape().len() == 3 { vec![bs, m, n] } else { vec![m, n] };
        let value = Tensor::from_vec(out_shape, out);
        let (a_shape, b_shape) = (self.shape().to_vec(), other.shape().to_vec());
        let (a_val, b_val) = (self.shared_value(), other.shared_value());
        Var::from_op(&[self, other], value, move |g, needs| {
            let gd = g.data();
            let da = needs[0].then(|| {
                let mut da = vec![F::zero(); bs * m * k];
                for i in 0..bs {
                    // dA = dC · Bᵀ where B is the (k×n) view
                    let bt = if transpose_rhs { (k as isize, 1) } else { (1, n as isize) };
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        &gd[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &b_val.data()[i * k * n..(i + 1) * k * n],
                        bt,
                        F::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                    );
                }
                Tensor::from_vec(a_shape.clone(), da)
            });
            let db = needs[1].then(|| {
                let mut db = vec![F::zero(); bs * k * n];
                for i in 0..bs {
                    let a = &a_val.data()[i * m * k..(i + 1) * m * k];
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let dst = &mut db[i * k * n..(i + 1) * k * n];
                    if transpose_rhs {
                        // other is n×k: d = dCᵀ · A
                        F::gemm(n, m, k, F::one(), gi, (1, n as isize), a, (k as isize, 1), F::zero(), dst, (k as isize, 1));
                    } else {
                        // other is k×n: d = Aᵀ · dC
                        F::gemm(k, m, n, F::one(), a, (1, k as isize), gi, (n as isize, 1), F::zero(), dst, (n as isize, 1));
                    }
                }
                Tensor::from_vec(b_shape.clone(), db)
            });
            vec![da, db]
        })
    }

    pub fn matmul(&self, other: &Var<F>) -> Var<F> {
        self.matmul_ext(other, false)
    }

    /// `x · Wᵀ + b` over the last axis; `weight` is `[out, in]`.
    pub fn linear(&self, weight: &Var<F>, bias: Option<&Var<F>>) -> Var<F> {
        let shape = self.shape().to_vec();
        let inp = *shape.last().expect("linear on scalar");
        let (out, win) = weight.value().dims2();
        assert_eq!(inp, win, "linear input width");
        let rows = self.value().len() / inp;
        let y = self.reshape([rows, inp]).matmul_ext(weight, true);
        let y = match bias {
            Some(b) => y.add_row_vector(b),
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out;
        y.reshape(out_shape)
    }

    /// Adds `[C]` to every row of `[N, C]`.
    pub fn add_row_vector(&self, v: &Var<F>) -> Var<F> {
        let (_, c) = self.value().dims2();
        assert_eq!(v.shape(), &[c]);
        let mut out = self.value().clone();
        let vd = v.value().data();
        for row in out.data_mut().chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(vd) {
                *x += b;
            }
        }
        Var::from_op(&[self, v], out, move |g, needs| {
            let gv = needs[1].then(|| {
                let mut acc = vec![F::zero(); c];
                for row in g.data().chunks(c) {
                    for (a, &x) in acc.iter_mut().zip(row) {
                        *a += x;
                    }
                }
                Tensor::from_vec([c], acc)
            });
            vec![needs[0].then(|| g.clone()), gv]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<F> {
        let c = *self.shape().last().expect("softmax on scalar");
        let mut y = self.value().clone();
        for row in y.data_mut().chunks_mut(c) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).fast_exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let yc = y.clone();
        Var::from_op(&[self], y, move |g, _| {
            let mut dx = g.clone();
            for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(yc.data().chunks(c)) {
                let dot: F = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (d, &y) in drow.iter_mut().zip(yrow) {
                    *d = y * (*d - dot);
                }
            }
            vec![Some(dx)]
        })
    }
}
