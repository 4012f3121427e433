//! ROI stage: a deterministic baseline blob detector, box matching, and
//! detection average precision. The tuned external-detector hyperparameters
//! are carried as a config record for integrations that slot a trained
//! two-stage detector behind the same CSV interface.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Record of the externally trained detector's hyperparameters. Consumed by
/// integrations, not by the math in this module.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalDetectorConfig {
    pub backbone: String,
    pub learning_rate: f64,
    pub step_size: u64,
    pub gamma: f64,
    pub dropout: f64,
    pub batch_size: usize,
}

impl Default for ExternalDetectorConfig {
    fn default() -> Self {
        ExternalDetectorConfig {
            backbone: "resnet50".into(),
            learning_rate: 0.001,
            step_size: 70_000,
            gamma: 0.1,
            dropout: 0.5,
            batch_size: 64,
        }
    }
}

/// Intersection-over-union of two axis-aligned boxes.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    inter / union
}

/// Greedy TP/FP labeling in descending score order; each ground-truth box
/// matches at most one prediction. Returns one flag per prediction, aligned
/// with the input order.
pub fn match_detections(preds: &[Detection], gts: &[BoundingBox], iou_min: f64) -> Vec<bool> {
    assert!(iou_min > 0.0 && iou_min <= 1.0, "iou_min must lie in (0,1]");
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    let mut gt_used = vec![false; gts.len()];
    let mut labels = vec![false; preds.len()];
    for &pi in &order {
        let mut best = -1.0;
        let mut best_g = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] {
                continue;
            }
            let iou = box_iou(&preds[pi].bbox, gt);
            if iou >= iou_min && iou > best {
                best = iou;
                best_g = Some(gi);
            }
        }
        if let Some(gi) = best_g {
            gt_used[gi] = true;
            labels[pi] = true;
        }
    }
    labels
}

/// All-point interpolated average precision at the given match IoU.
pub fn average_precision(preds: &[Detection], gts: &[BoundingBox], iou_min: f64) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::contract(
            "average_precision undefined with zero ground-truth boxes",
        ));
    }
    let labels = match_detections(preds, gts, iou_min);
    let mut ranked: Vec<(f64, bool)> = preds
        .iter()
        .zip(labels.iter())
        .map(|(p, &l)| (p.score, l))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let npos = gts.len() as f64;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < ranked.len() {
        // advance over a whole tie group before emitting a PR point
        let s = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == s {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / npos;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Baseline blob detector for desk-scale end-to-end runs: binarize the
/// lung-extracted image at the given intensity quantile of its nonzero
/// pixels, take 4-connected components of at least `min_area_px` pixels,
/// fit tight boxes, and score by mean component intensity / 255.
pub fn propose_rois_baseline(
    image: &Array2<f64>,
    min_area_px: usize,
    max_count: usize,
    quantile: f64,
) -> Vec<Detection> {
    let mut nonzero: Vec<f64> = image.iter().cloned().filter(|&v| v > 0.0).collect();
    if nonzero.is_empty() {
        return Vec::new();
    }
    nonzero.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let qi = ((nonzero.len() as f64 - 1.0) * quantile).round() as usize;
    let threshold = nonzero[qi];

    let (h, w) = image.dim();
    let mut labels = vec![0usize; h * w];
    let mut detections = Vec::new();
    let mut next_label = 0usize;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if labels[idx] != 0 || image[[y, x]] <= threshold {
                continue;
            }
            next_label += 1;
            stack.push((y, x));
            labels[idx] = next_label;
            let mut area = 0usize;
            let mut sum = 0.0;
            let (mut x0, mut y0, mut x1, mut y1) = (x, y, x, y);
            while let Some((cy, cx)) = stack.pop() {
                area += 1;
                sum += image[[cy, cx]];
                x0 = x0.min(cx);
                x1 = x1.max(cx);
                y0 = y0.min(cy);
                y1 = y1.max(cy);
                let neighbors = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w {
                        let nidx = ny * w + nx;
                        if labels[nidx] == 0 && image[[ny, nx]] > threshold {
                            labels[nidx] = next_label;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            if area >= min_area_px {
                detections.push(Detection {
                    bbox: BoundingBox {
                        x: x0 as f64,
                        y: y0 as f64,
                        w: (x1 - x0 + 1) as f64,
                        h: (y1 - y0 + 1) as f64,
                    },
                    score: (sum / area as f64 / 255.0).clamp(0.0, 1.0),
                });
            }
        }
    }
    detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    detections.truncate(max_count);
    detections
}

/// Detections CSV: `image,x,y,w,h,score`. Also the adapter format for
/// external detector output.
pub fn write_detections_csv(
    path: &Path,
    rows: &[(String, Detection)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    w.write_record(["image", "x", "y", "w", "h", "score"])
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    for (img, d) in rows {
        w.write_record([
            img.clone(),
            format!("{}", d.bbox.x),
            format!("{}", d.bbox.y),
            format!("{}", d.bbox.w),
            format!("{}", d.bbox.h),
            format!("{}", d.score),
        ])
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    w.flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_detections_csv(path: &Path) -> Result<Vec<(String, Detection)>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        if rec.len() != 6 {
            return Err(Error::Data(format!(
                "detections row with {} fields, expected 6",
                rec.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("bad number '{s}' in detections csv")))
        };
        rows.push((
            rec[0].to_string(),
            Detection {
                bbox: BoundingBox {
                    x: parse(&rec[1])?,
                    y: parse(&rec[2])?,
                    w: parse(&rec[3])?,
                    h: parse(&rec[4])?,
                },
                score: parse(&rec[5])?,
            },
        ));
    }
    Ok(rows)
}
