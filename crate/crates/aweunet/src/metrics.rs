//! Training losses and the evaluation suite: pixel-level ACC/SEN/SPE,
//! overlap DSC/IoU, ROC and PR curves with areas.
//!
//! Empty-mask conventions: when a class is absent from both prediction and
//! ground truth, its rate is 1.0; DSC and IoU of two empty masks are 1.0.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;
pub const IOU_EPS: f64 = 1e-6;

pub type SegmentationMask = Array2<u8>;
pub type ProbabilityMap = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub dsc: f64,
    pub iou: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
}

/// One curve sample: the threshold that produced it and its (x, y) point.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
}

fn check_shapes<A, B>(p: &Array2<A>, t: &Array2<B>, what: &str) -> Result<()> {
    if p.dim() != t.dim() {
        return Err(Error::contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            p.dim(),
            t.dim()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of a probability map against a binary mask,
/// with probabilities clamped to [1e-7, 1−1e-7].
pub fn bce_loss(probabilities: &ProbabilityMap, target: &SegmentationMask) -> Result<f64> {
    check_shapes(probabilities, target, "bce_loss")?;
    let n = probabilities.len() as f64;
    let mut loss = 0.0;
    for (&p, &t) in probabilities.iter().zip(target.iter()) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= if t != 0 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(loss / n)
}

/// Soft IoU loss: 1 − (Σpt + ε)/(Σp + Σt − Σpt + ε), ε = 1e-6.
pub fn iou_loss(probabilities: &ProbabilityMap, target: &SegmentationMask) -> Result<f64> {
    check_shapes(probabilities, target, "iou_loss")?;
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for (&p, &t) in probabilities.iter().zip(target.iter()) {
        let tf = f64::from(t != 0);
        inter += p * tf;
        sum_p += p;
        sum_t += tf;
    }
    Ok(1.0 - (inter + IOU_EPS) / (sum_p + sum_t - inter + IOU_EPS))
}

/// Weighted BCE + soft-IoU combination (unit weights by default).
pub fn combined_loss_weighted(
    probabilities: &ProbabilityMap,
    target: &SegmentationMask,
    w_bce: f64,
    w_iou: f64,
) -> Result<f64> {
    Ok(w_bce * bce_loss(probabilities, target)? + w_iou * iou_loss(probabilities, target)?)
}

pub fn combined_loss(probabilities: &ProbabilityMap, target: &SegmentationMask) -> Result<f64> {
    combined_loss_weighted(probabilities, target, 1.0, 1.0)
}

/// Exact TP/FP/TN/FN pixel counts. Inputs must be strictly 0/1.
pub fn confusion_counts(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<ConfusionCounts> {
    check_shapes(pred, gt, "confusion_counts")?;
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p > 1 || g > 1 {
            return Err(Error::contract(
                "confusion_counts: masks must be binary (0/1)",
            ));
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// (accuracy, sensitivity, specificity). A rate whose class is absent from
/// both masks is 1.0; absent from ground truth only, 0.0.
pub fn pixel_metrics(c: &ConfusionCounts) -> (f64, f64, f64) {
    let total = c.total();
    assert!(total > 0, "pixel_metrics on empty masks");
    let acc = (c.tp + c.tn) as f64 / total as f64;
    let sen = if c.tp + c.fn_ > 0 {
        c.tp as f64 / (c.tp + c.fn_) as f64
    } else if c.fp == 0 {
        1.0
    } else {
        0.0
    };
    let spe = if c.tn + c.fp > 0 {
        c.tn as f64 / (c.tn + c.fp) as f64
    } else if c.fn_ == 0 {
        1.0
    } else {
        0.0
    };
    (acc, sen, spe)
}

/// (DSC, IoU) of two binary masks; both empty → (1.0, 1.0).
pub fn overlap_metrics(pred: &SegmentationMask, gt: &SegmentationMask) -> (f64, f64) {
    assert_eq!(pred.dim(), gt.dim(), "overlap_metrics: shape mismatch");
    let mut inter = 0u64;
    let mut np = 0u64;
    let mut ng = 0u64;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (u64::from(p != 0), u64::from(g != 0));
        inter += p & g;
        np += p;
        ng += g;
    }
    if np + ng == 0 {
        return (1.0, 1.0);
    }
    let dsc = 2.0 * inter as f64 / (np + ng) as f64;
    let union = np + ng - inter;
    let iou = inter as f64 / union as f64;
    (dsc, iou)
}

/// Groups (score, label) pairs by descending score, returning per distinct
/// score: (score, positives at that score, negatives at that score).
fn score_groups(scores: &[f64], gt: &[u8]) -> Vec<(f64, u64, u64)> {
    let mut pairs: Vec<(f64, u8)> = scores.iter().cloned().zip(gt.iter().cloned()).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for (s, l) in pairs {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if l != 0 {
                    g.1 += 1;
                } else {
                    g.2 += 1;
                }
            }
            _ => groups.push((s, u64::from(l != 0), u64::from(l == 0))),
        }
    }
    groups
}

/// ROC curve (FPR, TPR) over every distinct score threshold plus the
/// trapezoidal AUC. Ground truth must contain both classes.
pub fn roc_curve(scores: &[f64], gt: &[u8]) -> Result<(Curve, f64)> {
    if scores.len() != gt.len() {
        return Err(Error::contract("roc_curve: length mismatch"));
    }
    let pos: u64 = gt.iter().map(|&g| u64::from(g != 0)).sum();
    let neg = gt.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        let missing = if pos == 0 { "positive" } else { "negative" };
        return Err(Error::Degenerate(format!(
            "roc_curve: ground truth has no {missing} pixels"
        )));
    }
    let mut curve = Curve::default();
    curve.points.push(CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    });
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc = 0.0;
    let (mut px, mut py) = (0.0, 0.0);
    for (s, gp, gn) in score_groups(scores, gt) {
        tp += gp;
        fp += gn;
        let x = fp as f64 / neg as f64;
        let y = tp as f64 / pos as f64;
        auc += (x - px) * (y + py) / 2.0;
        curve.points.push(CurvePoint {
            threshold: s,
            x,
            y,
        });
        (px, py) = (x, y);
    }
    Ok((curve, auc))
}

/// Precision–recall curve with all-point interpolated average precision
/// (Σ precision · Δrecall over the descending-score sweep).
pub fn pr_curve(scores: &[f64], gt: &[u8]) -> Result<(Curve, f64)> {
    if scores.len() != gt.len() {
        return Err(Error::contract("pr_curve: length mismatch"));
    }
    let pos: u64 = gt.iter().map(|&g| u64::from(g != 0)).sum();
    if pos == 0 {
        return Err(Error::Degenerate(
            "pr_curve: ground truth has no positive pixels".to_string(),
        ));
    }
    let mut curve = Curve::default();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (s, gp, gn) in score_groups(scores, gt) {
        tp += gp;
        fp += gn;
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / pos as f64;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
        curve.points.push(CurvePoint {
            threshold: s,
            x: recall,
            y: precision,
        });
    }
    Ok((curve, ap))
}

impl Curve {
    /// CSV with header `threshold,x,y`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "threshold,x,y")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.threshold, p.x, p.y)?;
        }
        Ok(())
    }
}
