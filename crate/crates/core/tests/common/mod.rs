//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::cell::RefCell;

use irstd_diff::denoiser::{Denoiser, DenoiserConfig};
use irstd_diff::liw::{Liw, LiwConfig};
use irstd_diff::losses::{bce_loss_var, combined_objective, iou_loss_var, noise_mse_var};
use irstd_diff::metrics::{BinaryMask, MATCH_DISTANCE};
use irstd_diff::wavelet::{haar_analysis, haar_synthesis};
use irstd_nn::gradcheck::check;
use irstd_nn::{Binding, Builder, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_STEP: f64 = 1e-5;

pub fn project(v: &Var<f64>, seed: u64) -> Var<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = Var::constant(Tensor::randn(v.shape().to_vec(), &mut r));
    v.mul(&w).sum_all()
}

/// Zero-initialized layers would make most gradients vanish; jitter every
/// parameter so each one actually influences the output.
pub fn jittered(store: &ParamStore<f64>, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    store
        .iter()
        .map(|(_, _, t)| {
            let noise = Tensor::<f64>::randn(t.shape().to_vec(), &mut r);
            t.zip_map(&noise, |a, n| a + 0.1 * n)
        })
        .collect()
}

fn worst(errors: &[f64]) -> f64 {
    errors.iter().copied().fold(0.0, f64::max)
}

/// Worst relative error of the Haar analysis and synthesis layers.
pub fn haar_grad_error() -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn([2, 3, 8, 8], &mut r);
    let a = check(&[x], |v| project(&haar_analysis(&v[0]), 2), GRAD_STEP, 128);
    let y = Tensor::<f64>::randn([2, 12, 4, 4], &mut r);
    let s = check(&[y], |v| project(&haar_synthesis(&v[0]), 3), GRAD_STEP, 128);
    worst(&a.rel_errors).max(worst(&s.rel_errors))
}

/// LIW on a `1×4×8×8` input, with respect to the input and every parameter.
pub fn liw_grad_error() -> f64 {
    let store = RefCell::new(ParamStore::<f64>::new());
    let rng = RefCell::new(ChaCha8Rng::seed_from_u64(4));
    let cfg = LiwConfig {
        levels: 2,
        window: 2,
        channels: 4,
        heads: 2,
    };
    let liw = Liw::new(&Builder::new(&store, &rng), cfg).unwrap();
    let store = store.into_inner();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut inputs = vec![Tensor::<f64>::randn([1, 4, 8, 8], &mut r)];
    inputs.extend(jittered(&store, 6));
    let g = check(
        &inputs,
        |v| {
            let p = Binding::from_vars(v[1..].to_vec());
            let (fh, res) = liw.forward(&p, &v[0]).unwrap();
            project(&fh, 7).add(&project(&res, 8))
        },
        GRAD_STEP,
        16,
    );
    worst(&g.rel_errors)
}

/// Soft IoU, BCE, noise MSE and their combination on `2×1×8×8` maps.
pub fn loss_grad_errors() -> Vec<(&'static str, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let shape = [2, 1, 8, 8];
    let gt = Tensor::<f64>::randn(shape.to_vec(), &mut r).map(|v| if v > 0.8 { 1.0 } else { 0.0 });
    let prob = Tensor::<f64>::uniform(shape.to_vec(), 0.45, &mut r).map(|v| v + 0.5);
    let eps = Tensor::<f64>::randn(shape.to_vec(), &mut r);
    let eps_hat = Tensor::<f64>::randn(shape.to_vec(), &mut r);
    let iou = check(&[prob.clone()], |v| iou_loss_var(&v[0], &gt).unwrap(), GRAD_STEP, 128);
    let bce = check(&[prob.clone()], |v| bce_loss_var(&v[0], &gt).unwrap(), GRAD_STEP, 128);
    let mse = check(&[eps_hat.clone()], |v| noise_mse_var(&eps, &v[0]).unwrap(), GRAD_STEP, 128);
    let all = check(
        &[eps_hat, prob],
        |v| combined_objective(&eps, &v[0], &v[1], &gt, 10.0).unwrap().0,
        GRAD_STEP,
        128,
    );
    vec![
        ("iou", worst(&iou.rel_errors)),
        ("bce", worst(&bce.rel_errors)),
        ("mse", worst(&mse.rel_errors)),
        ("combined", worst(&all.rel_errors)),
    ]
}

/// A small denoiser on `1×3×16×16` with attention and a bottleneck latent.
pub fn denoiser_grad_error() -> f64 {
    let store = RefCell::new(ParamStore::<f64>::new());
    let rng = RefCell::new(ChaCha8Rng::seed_from_u64(10));
    let cfg = DenoiserConfig {
        base_channels: 4,
        channel_mult: vec![1, 2, 2],
        res_blocks: 1,
        heads: 2,
        attention_ds: vec![2],
        in_channels: 3,
        out_channels: 1,
    };
    let net = Denoiser::new(&Builder::new(&store, &rng), cfg).unwrap();
    let store = store.into_inner();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f64>::randn([1, 3, 16, 16], &mut r);
    let latent = Tensor::<f64>::randn(net.latent_shape(1, 16, 16).to_vec(), &mut r);
    let mut inputs = vec![x, latent];
    inputs.extend(jittered(&store, 12));
    let g = check(
        &inputs,
        |v| {
            let p = Binding::from_vars(v[2..].to_vec());
            project(&net.forward(&p, &v[0], &[17], Some(&v[1])).unwrap(), 13)
        },
        GRAD_STEP,
        12,
    );
    worst(&g.rel_errors)
}

/// Components by repeated relabeling until no 8-neighbour pair disagrees,
/// ordered by their smallest pixel index.
pub fn naive_components(m: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = (m.height, m.width);
    let on: Vec<usize> = (0..h * w).filter(|&i| m.data[i]).collect();
    let mut label: Vec<usize> = (0..h * w).collect();
    loop {
        let mut changed = false;
        for &a in &on {
            for &b in &on {
                let (ra, ca) = ((a / w) as i64, (a % w) as i64);
                let (rb, cb) = ((b / w) as i64, (b % w) as i64);
                if (ra - rb).abs() <= 1 && (ca - cb).abs() <= 1 && label[a] != label[b] {
                    let low = label[a].min(label[b]);
                    label[a] = low;
                    label[b] = low;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = on.iter().map(|&i| label[i]).collect();
    roots.sort_unstable();
    roots.dedup();
    roots
        .iter()
        .map(|&r| on.iter().copied().filter(|&i| label[i] == r).collect())
        .collect()
}

pub fn naive_centroid(pixels: &[usize], w: usize) -> (f64, f64) {
    let n = pixels.len() as f64;
    let r: f64 = pixels.iter().map(|&i| (i / w) as f64).sum();
    let c: f64 = pixels.iter().map(|&i| (i % w) as f64).sum();
    (r / n, c / n)
}

/// `(true positives, targets, false-alarm pixels)` for one image: closest
/// centroid pairs first, each component used once, and every predicted
/// pixel outside a matched target counted as a false alarm.
pub fn naive_counts(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize) {
    let w = gt.width;
    let g = naive_components(gt);
    let p = naive_components(pred);
    let mut cands = Vec::new();
    for (i, gc) in g.iter().enumerate() {
        for (j, pc) in p.iter().enumerate() {
            let (a, b) = (naive_centroid(gc, w), naive_centroid(pc, w));
            let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            if d < MATCH_DISTANCE {
                cands.push((d, i, j));
            }
        }
    }
    cands.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut gu, mut pu) = (vec![false; g.len()], vec![false; p.len()]);
    let mut matched_gt = Vec::new();
    for (_, i, j) in cands {
        if !gu[i] && !pu[j] {
            gu[i] = true;
            pu[j] = true;
            matched_gt.push(i);
        }
    }
    let fp = (0..w * gt.height)
        .filter(|&px| pred.data[px] && !matched_gt.iter().any(|&i| g[i].contains(&px)))
        .count();
    (matched_gt.len(), g.len(), fp)
}

/// `(iou, pd, fa)` by brute force.
pub fn naive_metrics(preds: &[BinaryMask], gts: &[BinaryMask]) -> (f64, f64, f64) {
    let (mut inter, mut union) = (0, 0);
    let (mut tp, mut t, mut fp, mut px) = (0, 0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        inter += p.data.iter().zip(&g.data).filter(|(a, b)| **a && **b).count();
        union += p.data.iter().zip(&g.data).filter(|(a, b)| **a || **b).count();
        let c = naive_counts(p, g);
        tp += c.0;
        t += c.1;
        fp += c.2;
        px += g.data.len();
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    (iou, tp as f64 / t as f64, fp as f64 / px as f64)
}

/// A random evaluation set of up to 32×32 images with at least one target.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<BinaryMask>, Vec<BinaryMask>) {
    let (h, w) = (rng.random_range(4..=32), rng.random_range(4..=32));
    let n = rng.random_range(1..=3);
    let mask = |rng: &mut ChaCha8Rng| {
        let density = rng.random_range(0.02..0.25);
        BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect())
    };
    let preds: Vec<BinaryMask> = (0..n).map(|_| mask(rng)).collect();
    let mut gts: Vec<BinaryMask> = (0..n).map(|_| mask(rng)).collect();
    gts[0].data[0] = true;
    (preds, gts)
}
