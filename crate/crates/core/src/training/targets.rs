use ndarray::{Array4, Array5};
use serde::{Deserialize, Serialize};

use crate::boxes::{shape_iou, BBox};
use crate::detector::{ModelConfig, STRIDES};
use crate::error::{MarsError, Result};

/// A ground-truth object in network-input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Ground truth for one image of a batch.
#[derive(Debug, Clone, Copy)]
pub struct ImageTargets<'a> {
    pub image_id: &'a str,
    pub objects: &'a [GtObject],
}

/// Targets for one detection scale, laid out like the raw head output.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTargets {
    /// `[N, A, G, G]`, 1 where an anchor is responsible for an object.
    pub objectness: Array4<f64>,
    /// `[N, A, G, G]`, 1 where the no-object penalty is skipped.
    pub ignore: Array4<f64>,
    /// `[N, A, 4, G, G]`: `(tx, ty, tw, th)` with `tx, ty` the in-cell offsets.
    pub boxes: Array5<f64>,
    /// `[N, A, C, G, G]` one-hot.
    pub classes: Array5<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub item: usize,
    pub object: usize,
    pub scale: usize,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub scales: [ScaleTargets; 3],
    pub assignments: Vec<Assignment>,
    /// Objects whose every candidate anchor was already taken.
    pub dropped: usize,
}

impl TargetAssignment {
    pub fn batch_size(&self) -> usize {
        self.scales[0].objectness.shape()[0]
    }

    pub fn num_positive(&self) -> usize {
        self.scales
            .iter()
            .map(|s| s.objectness.iter().filter(|&&v| v > 0.0).count())
            .sum()
    }
}

/// Cell index and in-cell offset of a centre coordinate.
fn cell(center: f64, stride: f64, grid: usize) -> (usize, f64) {
    let g = center / stride;
    let idx = (g.floor().max(0.0) as usize).min(grid - 1);
    (idx, g - idx as f64)
}

/// Assign each ground-truth box to its best-shaped anchor at the cell that
/// contains its centre. A collision falls through to the next-best anchor.
pub fn assign_targets(
    batch: &[ImageTargets<'_>],
    cfg: &ModelConfig,
    ignore_iou_threshold: f64,
) -> Result<TargetAssignment> {
    let n = batch.len();
    let size = cfg.input_size as f64;
    let nc = cfg.num_classes;
    let mut scales = cfg.grid_sizes().map(|g| ScaleTargets {
        objectness: Array4::zeros((n, 3, g, g)),
        ignore: Array4::zeros((n, 3, g, g)),
        boxes: Array5::zeros((n, 3, 4, g, g)),
        classes: Array5::zeros((n, 3, nc, g, g)),
    });
    let mut assignments = Vec::new();
    let mut dropped = 0;

    for (item, img) in batch.iter().enumerate() {
        for (oi, obj) in img.objects.iter().enumerate() {
            let b = &obj.bbox;
            if !b.has_area() {
                return Err(MarsError::Data(format!(
                    "image {}: degenerate box {:?} (zero width or height)",
                    img.image_id,
                    b.to_array()
                )));
            }
            if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > size || b.y_max > size {
                return Err(MarsError::Data(format!(
                    "image {}: box {:?} outside the {size}x{size} input",
                    img.image_id,
                    b.to_array()
                )));
            }
            if obj.class_id >= nc {
                return Err(MarsError::Data(format!(
                    "image {}: class id {} out of range for {nc} classes",
                    img.image_id, obj.class_id
                )));
            }
            let (w, h) = (b.width(), b.height());
            let (cx, cy) = b.center();
            // Anchor index k in 0..9 lives at scale 2 - k / 3, slot k % 3.
            let mut ranked: Vec<(usize, f64)> = cfg
                .anchors
                .iter()
                .enumerate()
                .map(|(k, a)| (k, shape_iou(w, h, a[0], a[1])))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let locate = |k: usize| {
                let scale = 2 - k / 3;
                let stride = STRIDES[scale] as f64;
                let grid = cfg.input_size / STRIDES[scale];
                let (col, ox) = cell(cx, stride, grid);
                let (row, oy) = cell(cy, stride, grid);
                (scale, k % 3, row, col, ox, oy)
            };
            let mut chosen = None;
            for &(k, _) in &ranked {
                let (s, a, r, c, ox, oy) = locate(k);
                if scales[s].objectness[[item, a, r, c]] == 0.0 {
                    chosen = Some((k, s, a, r, c, ox, oy));
                    break;
                }
            }
            let Some((best_k, s, a, r, c, ox, oy)) = chosen else {
                dropped += 1;
                continue;
            };
            let t = &mut scales[s];
            t.objectness[[item, a, r, c]] = 1.0;
            t.ignore[[item, a, r, c]] = 0.0;
            let anchor = cfg.anchors[best_k];
            t.boxes[[item, a, 0, r, c]] = ox;
            t.boxes[[item, a, 1, r, c]] = oy;
            t.boxes[[item, a, 2, r, c]] = (w / anchor[0]).ln();
            t.boxes[[item, a, 3, r, c]] = (h / anchor[1]).ln();
            t.classes[[item, a, obj.class_id, r, c]] = 1.0;
            assignments.push(Assignment {
                item,
                object: oi,
                scale: s,
                anchor: a,
                row: r,
                col: c,
            });
            for &(k, sim) in &ranked {
                if k == best_k || sim < ignore_iou_threshold {
                    continue;
                }
                let (s2, a2, r2, c2, _, _) = locate(k);
                if scales[s2].objectness[[item, a2, r2, c2]] == 0.0 {
                    scales[s2].ignore[[item, a2, r2, c2]] = 1.0;
                }
            }
        }
    }
    Ok(TargetAssignment {
        scales,
        assignments,
        dropped,
    })
}
