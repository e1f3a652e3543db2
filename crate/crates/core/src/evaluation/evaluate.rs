use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::ap::{compute_ap, compute_map, ApMode, ClassDetection};
use crate::boxes::BBox;
use crate::data::{load_samples, DatasetManifest, Sample};
use crate::detector::{decode_predictions, non_max_suppression, Detection, Model};
use crate::error::{MarsError, Result};
use crate::graph::Mode;
use crate::training::{stack_images, GtObject};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
    pub match_iou_threshold: f64,
    pub ap_mode: ApMode,
    /// Images per inference batch.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf_threshold: 0.05,
            nms_iou_threshold: 0.45,
            match_iou_threshold: 0.5,
            ap_mode: ApMode::AllPoint,
            batch_size: 8,
        }
    }
}

impl EvalConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("eval.conf_threshold", self.conf_threshold),
            ("eval.nms_iou_threshold", self.nms_iou_threshold),
            ("eval.match_iou_threshold", self.match_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&x) {
                v.push(format!("{name} must lie in [0, 1], got {x}"));
            }
        }
        if self.batch_size == 0 {
            v.push("eval.batch_size must be >= 1".into());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub num_gt: usize,
    pub num_det: usize,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub classes: Vec<String>,
    pub per_class_ap: Vec<f64>,
    pub map: f64,
    pub counts: Vec<ClassCounts>,
    pub ap_mode: ApMode,
    pub iou_threshold: f64,
}

impl EvalResult {
    pub fn ap(&self, class: &str) -> Option<f64> {
        self.classes
            .iter()
            .position(|c| c == class)
            .map(|i| self.per_class_ap[i])
    }
}

/// One scored detection, for the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class: String,
    pub confidence: f64,
    pub bbox: [f64; 4],
    pub matched: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub result: EvalResult,
    pub records: Vec<DetectionRecord>,
}

/// Per-image detections and ground truth, both in one coordinate frame.
pub struct ImageEval<'a> {
    pub image_id: &'a str,
    pub detections: &'a [Detection],
    pub ground_truth: &'a [GtObject],
}

/// Score detections against ground truth, class by class.
pub fn evaluate_detections(
    images: &[ImageEval<'_>],
    classes: &[String],
    cfg: &EvalConfig,
) -> Result<EvalOutput> {
    if images.is_empty() {
        return Err(MarsError::Data("nothing to evaluate: the split is empty".into()));
    }
    let nc = classes.len();
    let mut dets: Vec<Vec<ClassDetection>> = vec![Vec::new(); nc];
    let mut gts: Vec<BTreeMap<String, Vec<BBox>>> = vec![BTreeMap::new(); nc];
    for im in images {
        for g in gts.iter_mut() {
            g.entry(im.image_id.to_string()).or_default();
        }
        for o in im.ground_truth {
            let g = gts.get_mut(o.class_id).ok_or_else(|| {
                MarsError::Data(format!("{}: class id {} out of range", im.image_id, o.class_id))
            })?;
            g.get_mut(im.image_id).expect("entry created above").push(o.bbox);
        }
        for d in im.detections {
            let list = dets.get_mut(d.class_id).ok_or_else(|| {
                MarsError::Data(format!(
                    "{}: detection class {} out of range",
                    im.image_id, d.class_id
                ))
            })?;
            list.push(ClassDetection {
                image_id: im.image_id.to_string(),
                bbox: d.bbox,
                confidence: d.confidence,
            });
        }
    }
    let mut per_class_ap = Vec::with_capacity(nc);
    let mut counts = Vec::with_capacity(nc);
    let mut records = Vec::new();
    for c in 0..nc {
        let out = compute_ap(&dets[c], &gts[c], cfg.match_iou_threshold, cfg.ap_mode);
        per_class_ap.push(out.ap);
        counts.push(ClassCounts {
            num_gt: out.num_gt,
            num_det: out.num_det,
            tp: out.tp,
            fp: out.fp,
        });
        for &(i, matched) in &out.ranked {
            let d = &dets[c][i];
            records.push(DetectionRecord {
                image_id: d.image_id.clone(),
                class: classes[c].clone(),
                confidence: d.confidence,
                bbox: d.bbox.to_array(),
                matched,
            });
        }
    }
    Ok(EvalOutput {
        result: EvalResult {
            classes: classes.to_vec(),
            map: compute_map(&per_class_ap),
            per_class_ap,
            counts,
            ap_mode: cfg.ap_mode,
            iou_threshold: cfg.match_iou_threshold,
        },
        records,
    })
}

/// Eval-mode inference, decode and per-class NMS, in network-input pixels.
pub fn predict(model: &Model, images: &ArrayD<f64>, cfg: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    let out = model.forward(images, Mode::Eval)?;
    let decoded = decode_predictions(&out.raw, model.config(), cfg.conf_threshold)?;
    Ok(decoded
        .iter()
        .map(|d| non_max_suppression(d, cfg.nms_iou_threshold))
        .collect())
}

/// Detections for every sample, batched.
pub fn predict_samples(model: &Model, samples: &[Sample], cfg: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    let mut all = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        all.extend(predict(model, &stack_images(&refs)?, cfg)?);
    }
    Ok(all)
}

fn to_original(s: &Sample, d: &Detection) -> Detection {
    let (w, h) = s.source_size;
    Detection {
        bbox: s.transform.inverse_box(&d.bbox).clip(w as f64, h as f64),
        ..*d
    }
}

/// Evaluate on already-letterboxed samples. Matching runs in network-input
/// pixels; the audit records carry original-image coordinates.
pub fn evaluate_samples(
    model: &Model,
    samples: &[Sample],
    classes: &[String],
    cfg: &EvalConfig,
) -> Result<EvalOutput> {
    if classes.len() != model.config().num_classes {
        return Err(MarsError::Data(format!(
            "model predicts {} classes, dataset lists {}",
            model.config().num_classes,
            classes.len()
        )));
    }
    let dets = predict_samples(model, samples, cfg)?;
    let images: Vec<ImageEval<'_>> = samples
        .iter()
        .zip(&dets)
        .map(|(s, d)| ImageEval {
            image_id: &s.id,
            detections: d,
            ground_truth: &s.objects,
        })
        .collect();
    let mut out = evaluate_detections(&images, classes, cfg)?;
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    for r in &mut out.records {
        let s = by_id[r.image_id.as_str()];
        let [x0, y0, x1, y1] = r.bbox;
        let d = Detection {
            bbox: BBox::new(x0, y0, x1, y1),
            class_id: 0,
            confidence: r.confidence,
        };
        r.bbox = to_original(s, &d).bbox.to_array();
    }
    Ok(out)
}

/// Load, letterbox and evaluate a manifest.
pub fn evaluate(model: &Model, manifest: &DatasetManifest, cfg: &EvalConfig) -> Result<EvalOutput> {
    if manifest.is_empty() {
        return Err(MarsError::Data(
            "nothing to evaluate: the manifest is empty".into(),
        ));
    }
    let samples = load_samples(manifest, model.config().input_size as u32)?;
    evaluate_samples(model, &samples, &manifest.classes, cfg)
}

/// Ground truth replayed as confidence-1 detections.
pub fn oracle_detections(samples: &[Sample]) -> Vec<Vec<Detection>> {
    samples
        .iter()
        .map(|s| {
            s.objects
                .iter()
                .map(|o| Detection {
                    bbox: o.bbox,
                    class_id: o.class_id,
                    confidence: 1.0,
                })
                .collect()
        })
        .collect()
}

/// Fraction of samples whose domain is predicted correctly. The prediction
/// is the argmax of the per-scale probabilities averaged over scales.
pub fn domain_accuracy(model: &Model, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(MarsError::Data("no samples for domain accuracy".into()));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let out = model.forward(&stack_images(&refs)?, Mode::Eval)?;
        let domains = out
            .domains
            .ok_or_else(|| MarsError::config("model has no domain branch"))?;
        for (b, s) in chunk.iter().enumerate() {
            let k = domains[0][b].len();
            let mean: Vec<f64> = (0..k)
                .map(|d| domains.iter().map(|sc| sc[b].probs[d]).sum::<f64>() / 3.0)
                .collect();
            let pred = mean
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &p)| if p > best.1 { (i, p) } else { best },
                )
                .0;
            if pred == s.domain_id {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
