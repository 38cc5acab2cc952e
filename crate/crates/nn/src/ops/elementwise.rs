use crate::{Float, Tensor, Var};

impl<F: Float> Var<F> {
    pub fn add(&self, other: &Var<F>) -> Var<F> {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(&[self, other], value, |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, other: &Var<F>) -> Var<F> {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(&[self, other], value, |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        })
    }

    pub fn mul(&self, other: &Var<F>) -> Var<F> {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        let (a, b) = (self.shared_value(), other.shared_value());
        Var::from_op(&[self, other], value, move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |g, b| g * b)),
                needs[1].then(|| g.zip_map(&a, |g, a| g * a)),
            ]
        })
    }

    pub fn scale(&self, s: f64) -> Var<F> {
        let s = F::lit(s);
        Var::from_op(&[self], self.value().scale(s), move |g, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&self, s: f64) -> Var<F> {
        let s = F::lit(s);
        Var::from_op(&[self], self.value().map(|v| v + s), |g, _| vec![Some(g.clone())])
    }

    pub fn sqr(&self) -> Var<F> {
        let x = self.shared_value();
        Var::from_op(&[self], self.value().map(|v| v * v), move |g, _| {
            let two = F::lit(2.0);
            vec![Some(g.zip_map(&x, |g, x| two * g * x))]
        })
    }

    pub fn relu(&self) -> Var<F> {
        let x = self.shared_value();
        Var::from_op(&[self], self.value().map(|v| v.max(F::zero())), move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| if x > F::zero() { g } else { F::zero() }))]
        })
    }

    pub fn silu(&self) -> Var<F> {
        let x = self.shared_value();
        Var::from_op(&[self], self.value().map(|v| v * v.sigmoid()), move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| {
                let s = x.sigmoid();
                g * s * (F::one() + x * (F::one() - s))
            }))]
        })
    }

    pub fn sigmoid(&self) -> Var<F> {
        let y = self.value().map(F::sigmoid);
        let yc = y.clone();
        Var::from_op(&[self], y, move |g, _| {
            vec![Some(g.zip_map(&yc, |g, y| g * y * (F::one() - y)))]
        })
    }

    /// Clamps to `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<F> {
        let (lo, hi) = (F::lit(lo), F::lit(hi));
        let x = self.shared_value();
        Var::from_op(&[self], self.value().map(|v| v.max(lo).min(hi)), move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| if x > lo && x < hi { g } else { F::zero() }))]
        })
    }

    /// Adds a per-(batch, channel) vector `[B, C]` to every spatial position
    /// of `self: [B, C, ...]`.
    pub fn add_channel_vector(&self, v: &Var<F>) -> Var<F> {
        let shape = self.shape().to_vec();
        assert!(shape.len() >= 2);
        let (b, c) = (shape[0], shape[1]);
        assert_eq!(v.shape(), &[b, c], "channel vector shape");
        let inner: usize = shape[2..].iter().product();
        let mut out = self.value().clone();
        {
            let vd = v.value().data();
            for (bc, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                let add = vd[bc];
                chunk.iter_mut().for_each(|x| *x += add);
            }
        }
        Var::from_op(&[self, v], out, move |g, needs| {
            let gv = needs[1].then(|| {
                let sums = g.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
                Tensor::from_vec([b, c], sums)
            });
            vec![needs[0].then(|| g.clone()), gv]
        })
    }

    pub fn sum_all(&self) -> Var<F> {
        let shape = self.shape().to_vec();
        Var::from_op(&[self], Tensor::scalar(self.value().sum()), move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean_all(&self) -> Var<F> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }
}
