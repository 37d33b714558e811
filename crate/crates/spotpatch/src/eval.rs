//! Detection evaluation: IoU, greedy matching, average precision, mAP@0.5.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    pub class: usize,
    /// Detection confidence; ignored on ground-truth boxes.
    pub score: f64,
}

impl Box {
    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin) * (self.ymax - self.ymin)
    }

    fn validate(&self) -> Result<()> {
        if self.xmax <= self.xmin || self.ymax <= self.ymin {
            return Err(Error::Argument(format!(
                "degenerate box ({}, {}, {}, {})",
                self.xmin, self.ymin, self.xmax, self.ymax
            )));
        }
        Ok(())
    }
}

pub fn iou(a: &Box, b: &Box) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let iy = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct APResult {
    /// class id -> AP, over classes with at least one ground-truth box.
    pub per_class: BTreeMap<usize, f64>,
    pub map: f64,
}

/// AP for one class: predictions sorted by descending score (ties broken by
/// input order), each greedily matched to the unmatched ground truth with
/// highest IoU >= threshold; area under the all-points interpolated
/// precision-recall curve.
pub fn average_precision(preds: &[Box], gts: &[Box], iou_thresh: f64) -> Result<f64> {
    if gts.is_empty() {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let v = iou(&preds[pi], gt)?;
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    // Precision-recall points, then the interpolated envelope.
    let n_gt = gts.len() as f64;
    let mut points = Vec::with_capacity(tp.len());
    let mut cum_tp = 0usize;
    for (k, &hit) in tp.iter().enumerate() {
        if hit {
            cum_tp += 1;
        }
        let precision = cum_tp as f64 / (k + 1) as f64;
        let recall = cum_tp as f64 / n_gt;
        points.push((recall, precision));
    }
    // Envelope: precision at recall r is the max precision at any recall >= r.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let p_env = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_recall) * p_env;
            prev_recall = r;
        }
    }
    Ok(ap)
}

/// mAP@0.5: unweighted mean AP over classes present in ground truth.
pub fn map_at_50(preds: &[Box], gts: &[Box]) -> Result<APResult> {
    map_at_iou(preds, gts, 0.5)
}

pub fn map_at_iou(preds: &[Box], gts: &[Box], iou_thresh: f64) -> Result<APResult> {
    if gts.is_empty() {
        return Err(Error::Argument("map: no ground-truth boxes".into()));
    }
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let p: Vec<Box> = preds.iter().filter(|b| b.class == c).cloned().collect();
        let g: Vec<Box> = gts.iter().filter(|b| b.class == c).cloned().collect();
        per_class.insert(c, average_precision(&p, &g, iou_thresh)?);
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(APResult { per_class, map })
}
