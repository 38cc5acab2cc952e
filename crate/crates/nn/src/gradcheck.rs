//! Central finite-difference gradient checking.
//!
//! The error for one input tensor is the norm-wise relative error
//! `‖g_analytic − g_numeric‖₂ / max(‖g_numeric‖₂, ‖g_analytic‖₂)` taken over
//! the probed entries. Both norms vanishing counts as agreement.

use std::rc::Rc;

use crate::{Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// One relative error per checked input.
    pub rel_errors: Vec<f64>,
    /// Number of probed entries per input.
    pub probed: Vec<usize>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h`. At most `max_entries` evenly spaced entries
/// of each input are probed.
pub fn check(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Var<f64>]) -> Var<f64>,
    h: f64,
    max_entries: usize,
) -> GradCheck {
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs
        .iter()
        .map(|t| Var::leaf(&tape, Rc::new(t.clone())))
        .collect();
    let out = f(&vars);
    assert_eq!(out.value().len(), 1, "gradient check needs a scalar output");
    let grads = tape.backward(&out);
    drop(out);

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let vs: Vec<Var<f64>> = perturbed.iter().cloned().map(Var::constant).collect();
        f(&vs).value().data()[0]
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut probed = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let n = inputs[i].len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let (mut diff2, mut num2, mut ana2) = (0.0, 0.0, 0.0);
        let mut count = 0;
        for j in (0..n).step_by(stride) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            diff2 += (a - numeric) * (a - numeric);
            num2 += numeric * numeric;
            ana2 += a * a;
            count += 1;
        }
        let denom = num2.sqrt().max(ana2.sqrt());
        rel_errors.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
        probed.push(count);
    }
    GradCheck { rel_errors, probed }
}
