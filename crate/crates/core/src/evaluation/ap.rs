use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};

/// Interpolation of the precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

impl ApMode {
    pub fn describe(&self) -> &'static str {
        match self {
            ApMode::AllPoint => "all-point interpolation",
            ApMode::ElevenPoint => "11-point interpolation",
        }
    }
}

/// A detection of the class being scored.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDetection {
    pub image_id: String,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Confidence descending, then image id, then box coordinates.
pub fn rank_order(a: &ClassDetection, b: &ClassDetection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApOutcome {
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
    pub tp: usize,
    pub fp: usize,
    /// Input indices in rank order, with their match status.
    pub ranked: Vec<(usize, bool)>,
}

/// Greedy matching in rank order. Each detection looks at the ground truth
/// of highest IoU in its image; it is a true positive when that IoU reaches
/// the threshold and the box is not yet taken.
pub fn compute_ap(
    detections: &[ClassDetection],
    ground_truth: &BTreeMap<String, Vec<BBox>>,
    iou_threshold: f64,
    mode: ApMode,
) -> ApOutcome {
    let num_gt: usize = ground_truth.values().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| rank_order(&detections[a], &detections[b]));
    let mut taken: BTreeMap<&str, Vec<bool>> = ground_truth
        .iter()
        .map(|(k, v)| (k.as_str(), vec![false; v.len()]))
        .collect();
    let mut ranked = Vec::with_capacity(order.len());
    for &i in &order {
        let d = &detections[i];
        let mut hit = false;
        if let (Some(gts), Some(used)) = (ground_truth.get(&d.image_id), taken.get_mut(d.image_id.as_str())) {
            let best = gts.iter().enumerate().map(|(j, g)| (j, iou(&d.bbox, g))).fold(
                None,
                |acc: Option<(usize, f64)>, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                },
            );
            if let Some((j, v)) = best {
                if v >= iou_threshold && !used[j] {
                    used[j] = true;
                    hit = true;
                }
            }
        }
        ranked.push((i, hit));
    }
    let tp = ranked.iter().filter(|r| r.1).count();
    let flags: Vec<bool> = ranked.iter().map(|r| r.1).collect();
    ApOutcome {
        ap: ap_from_flags(&flags, num_gt, mode),
        num_gt,
        num_det: detections.len(),
        tp,
        fp: detections.len() - tp,
        ranked,
    }
}

/// AP from the ranked TP/FP sequence. Zero when there is no ground truth.
pub fn ap_from_flags(flags: &[bool], num_gt: usize, mode: ApMode) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Make precision non-increasing from the right.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    match mode {
        ApMode::AllPoint => {
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                if *r > prev_r {
                    ap += (r - prev_r) * p;
                    prev_r = *r;
                }
            }
            ap
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Mean over the fixed class list; missing classes count as zero.
pub fn compute_map(per_class_ap: &[f64]) -> f64 {
    if per_class_ap.is_empty() {
        return 0.0;
    }
    per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(entries: &[(&str, Vec<BBox>)]) -> BTreeMap<String, Vec<BBox>> {
        entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn det(id: &str, b: BBox, c: f64) -> ClassDetection {
        ClassDetection {
            image_id: id.into(),
            bbox: b,
            confidence: c,
        }
    }

    #[test]
    fn perfect_and_null_detectors() {
        let b1 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b2 = BBox::new(20.0, 20.0, 30.0, 40.0);
        let g = gt(&[("a", vec![b1]), ("b", vec![b2])]);
        let perfect = [det("a", b1, 0.9), det("b", b2, 0.8)];
        assert_eq!(compute_ap(&perfect, &g, 0.5, ApMode::AllPoint).ap, 1.0);
        assert_eq!(compute_ap(&perfect, &g, 0.5, ApMode::ElevenPoint).ap, 1.0);
        assert_eq!(compute_ap(&[], &g, 0.5, ApMode::AllPoint).ap, 0.0);
        assert_eq!(compute_ap(&[], &BTreeMap::new(), 0.5, ApMode::AllPoint).ap, 0.0);
    }

    #[test]
    fn hand_computed_curve() {
        // Ranked TP, FP, TP over 2 ground truths: precision 1, 1/2, 2/3.
        // The envelope is 1 up to recall 1/2 and 2/3 up to recall 1.
        let ap = ap_from_flags(&[true, false, true], 2, ApMode::AllPoint);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        let ap11 = ap_from_flags(&[true, false, true], 2, ApMode::ElevenPoint);
        assert!((ap11 - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_adds_a_false_positive() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g = gt(&[("a", vec![b])]);
        let one = compute_ap(&[det("a", b, 0.9)], &g, 0.5, ApMode::AllPoint);
        let two = compute_ap(&[det("a", b, 0.9), det("a", b, 0.95)], &g, 0.5, ApMode::AllPoint);
        assert_eq!(two.fp, one.fp + 1);
        assert!(two.ap <= one.ap);
    }

    #[test]
    fn paper_rows() {
        let base = compute_map(&[0.8367, 0.7187, 0.5132, 0.6454, 0.0]);
        assert!((base * 100.0 - 54.28).abs() < 0.005);
        let best = compute_map(&[0.8477, 0.7534, 0.5712, 0.7228, 0.0335]);
        assert!((best - 0.58572).abs() < 1e-12);
        assert_eq!(compute_map(&[0.0; 5]), 0.0);
    }
}
