//! Discriminative losses, the noise objective and their combination.

use irstd_nn::{Float, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Probability clamp used by the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Default weight of the cross-entropy term.
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iou_loss: f64,
    pub bce_loss: f64,
    pub noise_mse: f64,
    pub combined: f64,
    pub lambda: f64,
}

fn check_pair<F: Float>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

// Per-sample (intersection, union) over a leading batch axis.
fn iou_terms<F: Float>(pred: &[F], gt: &[F], n: usize) -> Vec<(f64, f64)> {
    let per = pred.len() / n;
    (0..n)
        .map(|b| {
            let r = b * per..(b + 1) * per;
            let (mut inter, mut sum) = (0.0, 0.0);
            for (&p, &g) in pred[r.clone()].iter().zip(&gt[r]) {
                let (p, g) = (p.as_f64(), g.as_f64());
                inter += p * g;
                sum += p + g;
            }
            (inter, sum - inter)
        })
        .collect()
}

fn batch_len<F: Float>(pred: &Tensor<F>) -> Result<usize> {
    if pred.rank() == 0 || pred.dim(0) == 0 || pred.is_empty() {
        return Err(Error::InvalidArgument("IoU loss needs a non-empty batch".into()));
    }
    Ok(pred.dim(0))
}

/// `1 − mean_n IoU_n` with soft intersection `Σ p·g`. A sample where both
/// masks are empty counts as a perfect match.
pub fn iou_loss<F: Float>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<f64> {
    check_pair(pred, gt, "iou_loss")?;
    let n = batch_len(pred)?;
    let mean_iou = iou_terms(pred.data(), gt.data(), n)
        .into_iter()
        .map(|(i, u)| if u > 0.0 { i / u } else { 1.0 })
        .sum::<f64>()
        / n as f64;
    Ok(1.0 - mean_iou)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1 − ε]`.
pub fn bce_loss<F: Float>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<f64> {
    check_pair(pred, gt, "bce_loss")?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("BCE of an empty tensor".into()));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let (p, g) = (clamp_prob(p.as_f64()), g.as_f64());
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

pub fn noise_mse<F: Float>(eps: &Tensor<F>, eps_hat: &Tensor<F>) -> Result<f64> {
    check_pair(eps, eps_hat, "noise_mse")?;
    if eps.is_empty() {
        return Err(Error::InvalidArgument("MSE of an empty tensor".into()));
    }
    let s: f64 = eps
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / eps.len() as f64)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// `noise_mse + λ·bce`, with the IoU loss of `P` reported alongside.
pub fn combined_loss<F: Float>(
    eps: &Tensor<F>,
    eps_hat: &Tensor<F>,
    prob: &Tensor<F>,
    gt_mask: &Tensor<F>,
    lambda: f64,
) -> Result<LossReport> {
    check_lambda(lambda)?;
    let noise_mse = noise_mse(eps, eps_hat)?;
    let bce_loss = bce_loss(prob, gt_mask)?;
    Ok(LossReport {
        iou_loss: iou_loss(prob, gt_mask)?,
        bce_loss,
        noise_mse,
        combined: noise_mse + lambda * bce_loss,
        lambda,
    })
}

/// Differentiable soft IoU loss in `pred`.
pub fn iou_loss_var<F: Float>(pred: &Var<F>, gt: &Tensor<F>) -> Result<Var<F>> {
    let value = iou_loss(pred.value(), gt)?;
    let n = pred.value().dim(0);
    let terms = iou_terms(pred.value().data(), gt.data(), n);
    let gt = gt.clone();
    let shape = pred.shape().to_vec();
    Ok(Var::from_op(&[pred], Tensor::scalar(F::lit(value)), move |g, _| {
        let up = g.data()[0].as_f64();
        let per = gt.len() / n;
        let mut out = vec![F::zero(); gt.len()];
        for (b, &(inter, union)) in terms.iter().enumerate() {
            if union <= 0.0 {
                continue;
            }
            let r = b * per..(b + 1) * per;
            for (o, &gv) in out[r.clone()].iter_mut().zip(&gt.data()[r]) {
                let gv = gv.as_f64();
                let d_iou = (gv * union - inter * (1.0 - gv)) / (union * union);
                *o = F::lit(-up * d_iou / n as f64);
            }
        }
        vec![Some(Tensor::from_vec(shape.clone(), out))]
    }))
}

/// Differentiable clamped BCE in `pred`; clamped entries pass no gradient.
pub fn bce_loss_var<F: Float>(pred: &Var<F>, gt: &Tensor<F>) -> Result<Var<F>> {
    let value = bce_loss(pred.value(), gt)?;
    let p = pred.shared_value();
    let gt = gt.clone();
    Ok(Var::from_op(&[pred], Tensor::scalar(F::lit(value)), move |g, _| {
        let scale = g.data()[0].as_f64() / p.len() as f64;
        let grad = p.zip_map(&gt, |pv, gv| {
            let (pv, gv) = (pv.as_f64(), gv.as_f64());
            if pv <= BCE_EPS || pv >= 1.0 - BCE_EPS {
                F::zero()
            } else {
                F::lit(scale * (pv - gv) / (pv * (1.0 - pv)))
            }
        });
        vec![Some(grad)]
    }))
}

pub fn noise_mse_var<F: Float>(eps: &Tensor<F>, eps_hat: &Var<F>) -> Result<Var<F>> {
    check_pair(eps, eps_hat.value(), "noise_mse")?;
    Ok(eps_hat.sub(&Var::constant(eps.clone())).sqr().mean_all())
}

/// Training objective `mse + λ·bce` together with its scalar report.
pub fn combined_objective<F: Float>(
    eps: &Tensor<F>,
    eps_hat: &Var<F>,
    prob: &Var<F>,
    gt_mask: &Tensor<F>,
    lambda: f64,
) -> Result<(Var<F>, LossReport)> {
    let report = combined_loss(eps, eps_hat.value(), prob.value(), gt_mask, lambda)?;
    let mse = noise_mse_var(eps, eps_hat)?;
    let total = if lambda == 0.0 {
        mse
    } else {
        mse.add(&bce_loss_var(prob, gt_mask)?.scale(lambda))
    };
    Ok((total, report))
}

/// One row of the insensitivity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub iou_loss: f64,
    pub bce_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsensitivityReport {
    pub resolution: usize,
    pub batch_size: usize,
    /// Target footprint at this resolution.
    pub target_pixels: usize,
    pub fp_pixels: usize,
    pub fp_confidence: f64,
    pub iou_fp: f64,
    pub iou_miss: f64,
    pub bce_fp: f64,
    pub bce_miss: f64,
}

impl InsensitivityReport {
    pub fn rows(&self) -> Vec<Scenario> {
        vec![
            Scenario {
                name: "false_alarm".into(),
                iou_loss: self.iou_fp,
                bce_loss: self.bce_fp,
            },
            Scenario {
                name: "miss_detection".into(),
                iou_loss: self.iou_miss,
                bce_loss: self.bce_miss,
            },
        ]
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "resolution {}  batch {}  target {} px  false alarms {} px @ {}\n",
            self.resolution, self.batch_size, self.target_pixels, self.fp_pixels, self.fp_confidence
        );
        s.push_str(&format!("{:<16}{:>14}{:>14}\n", "scenario", "iou_loss", "bce_loss"));
        for r in self.rows() {
            s.push_str(&format!("{:<16}{:>14.6}{:>14.4e}\n", r.name, r.iou_loss, r.bce_loss));
        }
        s
    }
}

/// Reference resolution at which `target_pixels` is specified.
pub const REFERENCE_RESOLUTION: usize = 256;

/// Loss values for a batch in which every sample is predicted perfectly
/// except one:
///
/// * false alarm: the target is hit, plus `fp_pixels` background pixels
///   predicted foreground with probability `fp_confidence`;
/// * miss: the target is predicted background with the same confidence.
///
/// `target_pixels` is the footprint at 256×256; at other resolutions the
/// target keeps its share of the frame, so its pixel count scales with area
/// while isolated false-alarm pixels stay pixels.
pub fn insensitivity_report(
    resolution: usize,
    batch_size: usize,
    target_pixels: usize,
    fp_pixels: usize,
    fp_confidence: f64,
) -> Result<InsensitivityReport> {
    let bad = |m: String| Err(Error::InvalidArgument(m));
    if resolution == 0 || batch_size == 0 || target_pixels == 0 {
        return bad("resolution, batch size and target pixels must be positive".into());
    }
    if !(fp_confidence > 0.5 && fp_confidence < 1.0) {
        return bad(format!("false-alarm confidence must be in (0.5, 1), got {fp_confidence}"));
    }
    let area = resolution * resolution;
    let scale = (resolution as f64 / REFERENCE_RESOLUTION as f64).powi(2);
    let target = (target_pixels as f64 * scale).round() as usize;
    if target == 0 {
        return bad(format!("target vanishes at resolution {resolution}"));
    }
    if target + fp_pixels > area {
        return bad(format!(
            "{target} target + {fp_pixels} false-alarm pixels exceed the {area}-pixel frame"
        ));
    }
    let n = batch_size as f64;
    let total = n * area as f64;
    let conf_nll = -(1.0 - fp_confidence).ln();
    Ok(InsensitivityReport {
        resolution,
        batch_size,
        target_pixels: target,
        fp_pixels,
        fp_confidence,
        iou_fp: (1.0 - target as f64 / (target + fp_pixels) as f64) / n,
        iou_miss: 1.0 / n,
        bce_fp: fp_pixels as f64 * conf_nll / total,
        bce_miss: target as f64 * conf_nll / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(n: usize, side: usize) -> Tensor<f64> {
        Tensor::zeros([n, side, side])
    }

    #[test]
    fn iou_examples() {
        let mut gt = blank(8, 16);
        for b in 0..8 {
            for i in 0..10 {
                gt.data_mut()[b * 256 + i] = 1.0;
            }
        }
        assert_eq!(iou_loss(&gt, &gt).unwrap(), 0.0);
        let mut miss = gt.clone();
        for i in 0..10 {
            miss.data_mut()[3 * 256 + i] = 0.0;
        }
        assert_eq!(iou_loss(&miss, &gt).unwrap(), 0.125);

        let mut gt = Tensor::<f64>::zeros([8, 32, 32]);
        for b in 0..8 {
            for i in 0..100 {
                gt.data_mut()[b * 1024 + i] = 1.0;
            }
        }
        let mut fa = gt.clone();
        for i in 0..9 {
            fa.data_mut()[200 + i] = 1.0;
        }
        let v = iou_loss(&fa, &gt).unwrap();
        assert!((v - (1.0 - 100.0 / 109.0) / 8.0).abs() < 1e-12);
        assert!((v - 0.01032).abs() < 1e-5);
        assert!(iou_loss(&Tensor::<f64>::zeros([0, 4]), &Tensor::zeros([0, 4])).is_err());
        assert!(iou_loss(&blank(1, 4), &blank(1, 5)).is_err());
    }

    #[test]
    fn bce_examples() {
        let mut gt = blank(2, 4);
        gt.data_mut()[3] = 1.0;
        assert!(bce_loss(&gt, &gt).unwrap() <= 1.7e-6);
        let mut half_gt = Tensor::<f64>::zeros([4]);
        half_gt.data_mut()[0] = 1.0;
        half_gt.data_mut()[1] = 1.0;
        let half = Tensor::<f64>::full([4], 0.5);
        assert!((bce_loss(&half, &half_gt).unwrap() - 2f64.ln()).abs() < 1e-12);

        let gt = Tensor::<f64>::zeros([8, 256, 256]);
        let mut pred = gt.clone();
        for i in 0..9 {
            pred.data_mut()[i * 1000] = 0.99;
        }
        let v = bce_loss(&pred, &gt).unwrap();
        let expect = 9.0 * 100f64.ln() / (8.0 * 65536.0);
        assert!((v - expect).abs() < 2e-7, "{v} vs {expect}");
    }

    #[test]
    fn mse_examples() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let e = Tensor::<f64>::randn([10_000], &mut rng);
        assert_eq!(noise_mse(&e, &e).unwrap(), 0.0);
        let v = noise_mse(&e, &Tensor::zeros([10_000])).unwrap();
        assert!((v - 1.0).abs() < 3.0 * (2.0f64 / 10_000.0).sqrt());
        assert_eq!(noise_mse(&Tensor::scalar(2.0), &Tensor::scalar(0.0)).unwrap(), 4.0);
        assert!(noise_mse(&Tensor::<f64>::zeros([2]), &Tensor::zeros([3])).is_err());
    }

    #[test]
    fn combined_examples() {
        let eps = Tensor::<f64>::from_vec([1, 4], vec![1.0, -1.0, 0.5, 0.0]);
        let eps_hat = Tensor::<f64>::from_vec([1, 4], vec![0.5, -1.0, 0.0, 0.5]);
        let prob = Tensor::<f64>::from_vec([1, 4], vec![0.9, 0.2, 0.1, 0.6]);
        let gt = Tensor::<f64>::from_vec([1, 4], vec![1.0, 0.0, 0.0, 1.0]);
        let zero = combined_loss(&eps, &eps_hat, &prob, &gt, 0.0).unwrap();
        assert_eq!(zero.combined, zero.noise_mse);
        let r = combined_loss(&eps, &eps_hat, &prob, &gt, 10.0).unwrap();
        assert_eq!(r.combined, r.noise_mse + 10.0 * r.bce_loss);
        assert_eq!(r.noise_mse, 0.1875);
        let perfect = combined_loss(&eps, &eps, &gt, &gt, 10.0).unwrap();
        assert!(perfect.combined < 2e-5);
        assert!(combined_loss(&eps, &eps_hat, &prob, &gt, -1.0).is_err());
    }

    #[test]
    fn insensitivity_numbers() {
        let r = insensitivity_report(256, 8, 100, 9, 0.99).unwrap();
        assert_eq!(r.iou_miss, 0.125);
        assert!((r.iou_fp - 0.0103).abs() < 2e-4);
        assert!((r.iou_fp - (9.0 / 109.0) / 8.0).abs() < 1e-15);
        assert!((r.bce_fp - 7.905e-5).abs() < 1e-8);
        assert_eq!(insensitivity_report(256, 8, 100, 0, 0.99).unwrap().iou_fp, 0.0);
        let hi = insensitivity_report(512, 8, 100, 9, 0.99).unwrap();
        assert!(hi.iou_fp < r.iou_fp && hi.bce_fp < r.bce_fp);
        assert!(insensitivity_report(4, 1, 100, 9, 0.99).is_err());
        assert!(insensitivity_report(256, 0, 100, 9, 0.99).is_err());
        assert!(insensitivity_report(256, 8, 100, 9, 1.0).is_err());
        assert!(r.to_table().contains("0.125000"));
    }

    #[test]
    fn insensitivity_matches_loss_functions() {
        let r = insensitivity_report(256, 8, 100, 9, 0.99).unwrap();
        let mut gt = Tensor::<f64>::zeros([8, 256, 256]);
        for b in 0..8 {
            for y in 0..10 {
                for x in 0..10 {
                    gt.data_mut()[b * 65536 + (100 + y) * 256 + 100 + x] = 1.0;
                }
            }
        }
        let mut pred = gt.clone();
        for i in 0..9 {
            pred.data_mut()[5 * 256 + i * 3] = 0.99;
        }
        let binary = binarized(&pred);
        assert!((iou_loss(&binary, &gt).unwrap() - r.iou_fp).abs() < 1e-12);
        assert!((bce_loss(&pred, &gt).unwrap() - r.bce_fp).abs() < 2e-7);
    }

    fn binarized(t: &Tensor<f64>) -> Tensor<f64> {
        t.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
    }
}
