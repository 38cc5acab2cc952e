//! Dataset IoU, target-level detection probability, false-alarm rate and
//! ROC/AUC.

use std::collections::VecDeque;

use irstd_nn::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Largest centroid deviation (exclusive) for a detection to count.
pub const MATCH_DISTANCE: f64 = 3.0;

/// Default number of interior ROC thresholds.
pub const ROC_THRESHOLDS: usize = 128;

/// Row-major `{0, 1}` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    /// From a tensor whose trailing two axes are the plane; values must be
    /// exactly 0 or 1.
    pub fn from_tensor<F: Float>(t: &Tensor<F>) -> Result<Self> {
        let (h, w) = plane_dims(t)?;
        let mut data = Vec::with_capacity(t.len());
        for &v in t.data() {
            if v == F::zero() {
                data.push(false);
            } else if v == F::one() {
                data.push(true);
            } else {
                return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
            }
        }
        Ok(Self::new(h, w, data))
    }

    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        Tensor::from_vec(
            [self.height, self.width],
            self.data.iter().map(|&b| if b { F::one() } else { F::zero() }).collect(),
        )
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }
}

fn plane_dims<F: Float>(t: &Tensor<F>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(shape_err(format!("expected a single plane, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// 8-connected components as lists of flat pixel indices, in raster order
/// of their first pixel.
pub fn label_components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if mask.data[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Mean `(row, col)` of a component.
pub fn centroid(pixels: &[usize], width: usize) -> (f64, f64) {
    let n = pixels.len() as f64;
    let (sr, sc) = pixels.iter().fold((0.0, 0.0), |(r, c), &i| {
        (r + (i / width) as f64, c + (i % width) as f64)
    });
    (sr / n, sc / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMatch {
    pub gt_centroids: Vec<(f64, f64)>,
    pub pred_centroids: Vec<(f64, f64)>,
    /// `(gt index, pred index, deviation)`.
    pub matches: Vec<(usize, usize, f64)>,
    pub true_positives: usize,
    pub targets: usize,
    pub fp_pixels: usize,
    pub pixels: usize,
}

fn check_same(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(shape_err(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Greedy nearest-centroid matching of predicted to ground-truth components.
pub fn match_targets(pred: &BinaryMask, gt: &BinaryMask) -> Result<TargetMatch> {
    check_same(pred, gt)?;
    let w = gt.width;
    let gt_comps = label_components(gt);
    let pred_comps = label_components(pred);
    let gt_centroids: Vec<_> = gt_comps.iter().map(|c| centroid(c, w)).collect();
    let pred_centroids: Vec<_> = pred_comps.iter().map(|c| centroid(c, w)).collect();

    let mut pairs = Vec::new();
    for (i, g) in gt_centroids.iter().enumerate() {
        for (j, p) in pred_centroids.iter().enumerate() {
            let d = ((g.0 - p.0).powi(2) + (g.1 - p.1).powi(2)).sqrt();
            if d < MATCH_DISTANCE {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt_comps.len()];
    let mut pred_used = vec![false; pred_comps.len()];
    let mut matches = Vec::new();
    for (d, i, j) in pairs {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            matches.push((i, j, d));
        }
    }
    matches.sort_by_key(|m| m.0);

    let mut covered = vec![false; w * gt.height];
    for &(i, _, _) in &matches {
        for &p in &gt_comps[i] {
            covered[p] = true;
        }
    }
    let fp_pixels = pred
        .data
        .iter()
        .zip(&covered)
        .filter(|(&p, &c)| p && !c)
        .count();
    Ok(TargetMatch {
        true_positives: matches.len(),
        targets: gt_comps.len(),
        gt_centroids,
        pred_centroids,
        matches,
        fp_pixels,
        pixels: w * gt.height,
    })
}

fn check_sets(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    preds.iter().zip(gts).try_for_each(|(p, g)| check_same(p, g))
}

/// `Σ TP_i / Σ (T_i + P_i − TP_i)` over the whole set. A set where both
/// sides are empty everywhere scores 1.
pub fn dataset_iou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    check_sets(preds, gts)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        for (&a, &b) in p.data.iter().zip(&g.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `TP_sum / T_sum`.
pub fn prob_detection(matches: &[TargetMatch]) -> Result<f64> {
    let targets: usize = matches.iter().map(|m| m.targets).sum();
    if targets == 0 {
        return Err(Error::UndefinedMetric(
            "Pd needs at least one ground-truth target".into(),
        ));
    }
    Ok(matches.iter().map(|m| m.true_positives).sum::<usize>() as f64 / targets as f64)
}

/// False-positive pixels over all pixels, from per-image matches.
pub fn false_alarm_from_matches(matches: &[TargetMatch]) -> Result<f64> {
    let pixels: usize = matches.iter().map(|m| m.pixels).sum();
    if pixels == 0 {
        return Err(Error::InvalidArgument("no pixels to evaluate".into()));
    }
    Ok(matches.iter().map(|m| m.fp_pixels).sum::<usize>() as f64 / pixels as f64)
}

pub fn false_alarm_rate(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    check_sets(preds, gts)?;
    let m = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match_targets(p, g))
        .collect::<Result<Vec<_>>>()?;
    false_alarm_from_matches(&m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    /// Score-positive background pixels over all pixels.
    pub fa: f64,
    /// Score-positive target pixels over all target pixels.
    pub pd: f64,
}

/// Pixel-level threshold sweep. Each threshold `τ` labels `score ≥ τ`
/// positive. The sweep covers `thresholds` evenly spaced values over the
/// score range plus an end point above the maximum, so the curve runs from
/// `(0, 0)` to `(Fa_max, 1)`. The AUC integrates Pd over `Fa / Fa_max` by the
/// trapezoidal rule.
pub fn roc_auc<F: Float>(
    scores: &[Tensor<F>],
    gts: &[BinaryMask],
    thresholds: usize,
) -> Result<(Vec<RocPoint>, f64)> {
    if scores.is_empty() || scores.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} score maps for {} masks",
            scores.len(),
            gts.len()
        )));
    }
    if thresholds < 2 {
        return Err(Error::InvalidArgument("need at least 2 thresholds".into()));
    }
    let mut px: Vec<(f64, bool)> = Vec::new();
    for (s, g) in scores.iter().zip(gts) {
        if plane_dims(s)? != (g.height, g.width) {
            return Err(shape_err(format!("score map {:?} vs mask {}x{}", s.shape(), g.height, g.width)));
        }
        for (&v, &l) in s.data().iter().zip(&g.data) {
            let v = v.as_f64();
            if !v.is_finite() {
                return Err(Error::InvalidArgument("score maps must be finite".into()));
            }
            px.push((v, l));
        }
    }
    let lo = px.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = px.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::UndefinedMetric(format!(
            "all scores equal {lo}; a ROC curve needs varying scores (pass continuous logits, not a constant map)"
        )));
    }
    let positives = px.iter().filter(|p| p.1).count();
    let negatives = px.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "ROC needs both target and background pixels".into(),
        ));
    }
    // Descending by score; prefix counts give the positives at any cut.
    px.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp_prefix = Vec::with_capacity(px.len() + 1);
    tp_prefix.push(0usize);
    for p in &px {
        tp_prefix.push(tp_prefix.last().unwrap() + p.1 as usize);
    }
    let total = px.len() as f64;
    let point = |th: f64| {
        let k = px.partition_point(|p| p.0 >= th);
        let tp = tp_prefix[k];
        RocPoint {
            threshold: th,
            fa: (k - tp) as f64 / total,
            pd: tp as f64 / positives as f64,
        }
    };
    let mut roc: Vec<RocPoint> = (0..thresholds)
        .map(|i| point(hi - (hi - lo) * i as f64 / (thresholds - 1) as f64))
        .collect();
    // Finite so reports stay valid JSON.
    roc.insert(0, point(hi + (hi - lo)));
    roc.sort_by(|a, b| a.fa.total_cmp(&b.fa).then(a.pd.total_cmp(&b.pd)));
    let fa_max = roc.iter().map(|p| p.fa).fold(0.0, f64::max);
    let auc = roc
        .windows(2)
        .map(|w| (w[1].fa - w[0].fa) / fa_max * (w[0].pd + w[1].pd) / 2.0)
        .sum();
    Ok((roc, auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub pd: f64,
    pub fa: f64,
    pub roc: Vec<RocPoint>,
    pub auc: Option<f64>,
    pub matches: Vec<TargetMatch>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let auc = self.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        format!(
            "IoU {:.4}  Pd {:.4}  Fa {:.3e}  AUC {auc}  ({} images)",
            self.iou,
            self.pd,
            self.fa,
            self.matches.len()
        )
    }
}

/// Full report. ROC/AUC is computed when score maps are given.
pub fn evaluate<F: Float>(
    preds: &[BinaryMask],
    gts: &[BinaryMask],
    scores: Option<&[Tensor<F>]>,
) -> Result<EvalReport> {
    check_sets(preds, gts)?;
    let matches = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match_targets(p, g))
        .collect::<Result<Vec<_>>>()?;
    let (roc, auc) = match scores {
        Some(s) => {
            let (r, a) = roc_auc(s, gts, ROC_THRESHOLDS)?;
            (r, Some(a))
        }
        None => (Vec::new(), None),
    };
    Ok(EvalReport {
        iou: dataset_iou(preds, gts)?,
        pd: prob_detection(&matches)?,
        fa: false_alarm_from_matches(&matches)?,
        roc,
        auc,
        matches,
    })
}
