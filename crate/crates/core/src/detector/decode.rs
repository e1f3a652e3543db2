use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, STRIDES};
use super::model::RawPrediction;
use crate::boxes::{iou, BBox};
use crate::error::{MarsError, Result};
use crate::graph::sigmoid_scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

/// Confidence descending, then box coordinates, then class.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
        .then_with(|| a.class_id.cmp(&b.class_id))
}

/// Turn raw head outputs into boxes in network-input pixels, one list per
/// batch item. Each anchor emits at most one detection, for its best class.
pub fn decode_predictions(
    raw: &RawPrediction,
    cfg: &ModelConfig,
    conf_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(MarsError::config(format!(
            "confidence threshold must lie in [0, 1], got {conf_threshold}"
        )));
    }
    raw.check(cfg)?;
    let n = raw.batch_size();
    let per = cfg.outputs_per_anchor();
    let size = cfg.input_size as f64;
    let mut out = vec![Vec::new(); n];
    for (s, t) in raw.scales.iter().enumerate() {
        let grid = t.shape()[2];
        let stride = STRIDES[s] as f64;
        let anchors = cfg.scale_anchors(s);
        for (b, dets) in out.iter_mut().enumerate() {
            for (a, anchor) in anchors.iter().enumerate() {
                let ch = |k: usize, i: usize, j: usize| t[[b, a * per + k, i, j]];
                for i in 0..grid {
                    for j in 0..grid {
                        let obj = sigmoid_scalar(ch(4, i, j));
                        let (class_id, cls) = (0..cfg.num_classes)
                            .map(|c| (c, sigmoid_scalar(ch(5 + c, i, j))))
                            .fold(
                                (0, f64::NEG_INFINITY),
                                |best, x| {
                                    if x.1 > best.1 {
                                        x
                                    } else {
                                        best
                                    }
                                },
                            );
                        let confidence = obj * cls;
                        if confidence < conf_threshold || confidence <= 0.0 {
                            continue;
                        }
                        let cx = (j as f64 + sigmoid_scalar(ch(0, i, j))) * stride;
                        let cy = (i as f64 + sigmoid_scalar(ch(1, i, j))) * stride;
                        let w = anchor[0] * ch(2, i, j).exp();
                        let h = anchor[1] * ch(3, i, j).exp();
                        let bbox = BBox::from_center(cx, cy, w, h).clip(size, size);
                        if !bbox.is_valid() {
                            continue;
                        }
                        dets.push(Detection {
                            bbox,
                            class_id,
                            confidence,
                        });
                    }
                }
            }
        }
    }
    for d in &mut out {
        d.sort_by(detection_order);
    }
    Ok(out)
}

/// Greedy per-class suppression. A detection survives iff its IoU with every
/// higher-ranked survivor of the same class is below `iou_threshold`.
pub fn non_max_suppression(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| detection_order(&dets[a], &dets[b]));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[pos + 1..] {
            if !suppressed[j]
                && dets[j].class_id == dets[i].class_id
                && iou(&dets[i].bbox, &dets[j].bbox) >= iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}
