#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use mars_core::boxes::{iou, shape_iou, BBox};
use mars_core::detector::{Detection, ModelConfig, RawPrediction, STRIDES};
use mars_core::evaluation::ApMode;
use mars_core::graph::{Graph, Var};
use mars_core::params::{ParamKind, ParamStore, Tensor};
use mars_core::training::{GtObject, TargetAssignment};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], sd: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Norm-wise relative difference of two tensors. The denominator is
/// floored at 1e-4 so that gradients which vanish identically (a bias in
/// front of a train-mode batch norm) compare by absolute error against
/// the finite-difference round-off.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    diff / scale.max(1e-4)
}

pub type BlockFn<'a> = dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Vec<Var> + 'a;

/// Scalar probe `Σ_i <out_i, w_i>` of a block.
fn probe(store: &ParamStore, inputs: &[Tensor], weights: &[Tensor], f: &BlockFn<'_>) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let outs = f(&mut g, store, &vars);
    outs.iter()
        .zip(weights)
        .map(|(&o, w)| (g.value(o) * w).sum())
        .sum()
}

/// Largest norm-wise relative error between backprop and central
/// differences, over every input and every trainable tensor.
pub fn gradient_check(
    store: &mut ParamStore,
    inputs: &[Tensor],
    f: &BlockFn<'_>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let outs = f(&mut g, store, &vars);
    let weights: Vec<Tensor> = outs.iter().map(|&o| randn(rng, g.shape(o), 1.0)).collect();
    let terms: Vec<(Var, f64)> = outs
        .iter()
        .zip(&weights)
        .map(|(&o, w)| (g.weighted_sum(o, w.clone()).unwrap(), 1.0))
        .collect();
    let loss = g.combine(&terms);
    g.backward(loss).unwrap();
    let input_grads: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).raw_dim()))
        })
        .collect();
    let param_grads = g.param_grads();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut inputs = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        let mut fd = Tensor::zeros(inputs[k].raw_dim());
        for i in 0..fd.len() {
            let orig = inputs[k].as_slice().unwrap()[i];
            inputs[k].as_slice_mut().unwrap()[i] = orig + h;
            let up = probe(store, &inputs, &weights, f);
            inputs[k].as_slice_mut().unwrap()[i] = orig - h;
            let down = probe(store, &inputs, &weights, f);
            inputs[k].as_slice_mut().unwrap()[i] = orig;
            fd.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(analytic, &fd));
    }
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.kind(id) == ParamKind::Trainable)
        .collect();
    for id in ids {
        let analytic = param_grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).raw_dim()));
        let mut fd = Tensor::zeros(store.get(id).raw_dim());
        for i in 0..fd.len() {
            let orig = store.get(id).as_slice().unwrap()[i];
            store.get_mut(id).as_slice_mut().unwrap()[i] = orig + h;
            let up = probe(store, &inputs, &weights, f);
            store.get_mut(id).as_slice_mut().unwrap()[i] = orig - h;
            let down = probe(store, &inputs, &weights, f);
            store.get_mut(id).as_slice_mut().unwrap()[i] = orig;
            fd.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &fd));
    }
    worst
}

// ---- suppression -------------------------------------------------------------

/// The kept set of greedy per-class suppression is the unique subset `K`
/// with: `d ∈ K` iff no member of `K` ranked above `d` in the same class
/// overlaps it at `thr` or more. Found by trying every subset.
pub fn nms_exhaustive(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    assert!(n <= 16);
    let above = |a: &Detection, b: &Detection| {
        a.confidence > b.confidence
            || (a.confidence == b.confidence
                && (a.bbox.to_array(), a.class_id).partial_cmp(&(b.bbox.to_array(), b.class_id))
                    == Some(std::cmp::Ordering::Less))
    };
    let mut fixed = Vec::new();
    for mask in 0u32..(1 << n) {
        let ok = (0..n).all(|i| {
            let blocked = (0..n).any(|j| {
                j != i
                    && mask & (1 << j) != 0
                    && dets[j].class_id == dets[i].class_id
                    && above(&dets[j], &dets[i])
                    && iou(&dets[j].bbox, &dets[i].bbox) >= thr
            });
            (mask & (1 << i) != 0) == !blocked
        });
        if ok {
            fixed.push(mask);
        }
    }
    assert_eq!(fixed.len(), 1, "suppression fixed point must be unique");
    let mut kept: Vec<Detection> = (0..n)
        .filter(|i| fixed[0] & (1 << i) != 0)
        .map(|i| dets[i])
        .collect();
    kept.sort_by(|a, b| {
        if above(a, b) {
            std::cmp::Ordering::Less
        } else if above(b, a) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    kept
}

// ---- average precision -------------------------------------------------------

pub struct ApCase {
    pub dets: Vec<(String, BBox, f64)>,
    pub gt: BTreeMap<String, Vec<BBox>>,
}

/// Detections in rank order: confidence down, image id, box.
fn ranked(dets: &[(String, BBox, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ia, ba, ca) = &dets[a];
        let (ib, bb, cb) = &dets[b];
        cb.partial_cmp(ca)
            .unwrap()
            .then(ia.cmp(ib))
            .then(ba.to_array().partial_cmp(&bb.to_array()).unwrap())
    });
    idx
}

/// True-positive count of the first `k` ranked detections, matching from
/// scratch: each detection takes its highest-IoU box (first on ties), and
/// counts when the overlap clears `thr` and the box is still free.
fn prefix_tp(case: &ApCase, order: &[usize], k: usize, thr: f64) -> (usize, bool) {
    let mut used: HashMap<(&str, usize), bool> = HashMap::new();
    let mut tp = 0;
    let mut last = false;
    for &i in &order[..k] {
        let (img, b, _) = &case.dets[i];
        last = false;
        let Some(gts) = case.gt.get(img) else { continue };
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let v = iou(b, g);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v >= thr && !used.contains_key(&(img.as_str(), j)) {
                used.insert((img.as_str(), j), true);
                tp += 1;
                last = true;
            }
        }
    }
    (tp, last)
}

/// Reference AP and per-rank match flags. Precision at every rank comes
/// from a full rematch of that prefix; all-point AP sums, over each true
/// positive, `1/num_gt` times the best precision at that rank or later.
pub fn ap_exhaustive(case: &ApCase, thr: f64, mode: ApMode) -> (f64, Vec<bool>) {
    let num_gt: usize = case.gt.values().map(Vec::len).sum();
    let order = ranked(&case.dets);
    let n = order.len();
    let mut prec = Vec::with_capacity(n);
    let mut rec = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for k in 1..=n {
        let (tp, last) = prefix_tp(case, &order, k, thr);
        prec.push(tp as f64 / k as f64);
        rec.push(if num_gt == 0 {
            0.0
        } else {
            tp as f64 / num_gt as f64
        });
        flags.push(last);
    }
    if num_gt == 0 {
        return (0.0, flags);
    }
    let best_after = |k: usize| prec[k..].iter().cloned().fold(0.0, f64::max);
    let ap = match mode {
        ApMode::AllPoint => (0..n)
            .filter(|&k| flags[k])
            .map(|k| best_after(k) / num_gt as f64)
            .sum(),
        ApMode::ElevenPoint => {
            let mut s = 0.0;
            for t in 0..=10 {
                let t = t as f64 / 10.0;
                let p = (0..n)
                    .filter(|&k| rec[k] >= t - 1e-12)
                    .map(|k| prec[k])
                    .fold(0.0, f64::max);
                s += p;
            }
            s / 11.0
        }
    };
    (ap, flags)
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64, min: f64, max: f64) -> BBox {
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h)
}

// ---- detection loss ------------------------------------------------------------

#[derive(Debug, Default, Clone, Copy)]
pub struct RefLoss {
    pub box_loss: f64,
    pub objectness: f64,
    pub class: f64,
}

impl RefLoss {
    pub fn total(&self) -> f64 {
        self.box_loss + self.objectness + self.class
    }
}

/// Scalar loops straight from the definitions. Positive cells come from the
/// assignment list; box targets, ignore cells and every loss term are
/// recomputed here from the ground truth.
pub fn detection_loss_reference(
    raw: &RawPrediction,
    batch: &[Vec<GtObject>],
    t: &TargetAssignment,
    cfg: &ModelConfig,
    ignore_thr: f64,
) -> RefLoss {
    let n = batch.len();
    let per = 5 + cfg.num_classes;
    let grids = cfg.grid_sizes();
    let mut positive: HashMap<(usize, usize, usize, usize, usize), (usize, usize)> = HashMap::new();
    for a in &t.assignments {
        positive.insert((a.item, a.scale, a.anchor, a.row, a.col), (a.item, a.object));
    }
    // Anchor k sits at scale 2 - k/3, slot k%3.
    let cell_of = |b: &BBox, k: usize| {
        let s = 2 - k / 3;
        let stride = STRIDES[s] as f64;
        let (cx, cy) = b.center();
        let g = grids[s];
        let col = ((cx / stride).floor() as usize).min(g - 1);
        let row = ((cy / stride).floor() as usize).min(g - 1);
        (s, k % 3, row, col)
    };
    let mut ignored = std::collections::HashSet::new();
    for (item, objs) in batch.iter().enumerate() {
        for o in objs {
            for (k, a) in cfg.anchors.iter().enumerate() {
                if shape_iou(o.bbox.width(), o.bbox.height(), a[0], a[1]) >= ignore_thr {
                    let (s, an, r, c) = cell_of(&o.bbox, k);
                    ignored.insert((item, s, an, r, c));
                }
            }
        }
    }
    let bce = |z: f64, y: f64| -(y * sigmoid(z).ln() + (1.0 - y) * (1.0 - sigmoid(z)).ln());
    let mut out = RefLoss::default();
    for s in 0..3 {
        let g = grids[s];
        let stride = STRIDES[s] as f64;
        let anchors = cfg.scale_anchors(s);
        let r = &raw.scales[s];
        for b in 0..n {
            for a in 0..3 {
                for i in 0..g {
                    for j in 0..g {
                        let z = |k: usize| r[[b, a * per + k, i, j]];
                        if let Some(&(item, oi)) = positive.get(&(b, s, a, i, j)) {
                            let o = batch[item][oi];
                            let (cx, cy) = o.bbox.center();
                            let tx = cx / stride - j as f64;
                            let ty = cy / stride - i as f64;
                            let tw = (o.bbox.width() / anchors[a][0]).ln();
                            let th = (o.bbox.height() / anchors[a][1]).ln();
                            out.box_loss += (sigmoid(z(0)) - tx).powi(2)
                                + (sigmoid(z(1)) - ty).powi(2)
                                + (z(2) - tw).powi(2)
                                + (z(3) - th).powi(2);
                            out.objectness += bce(z(4), 1.0);
                            for c in 0..cfg.num_classes {
                                let y = if c == o.class_id { 1.0 } else { 0.0 };
                                out.class += bce(z(5 + c), y);
                            }
                        } else if !ignored.contains(&(b, s, a, i, j)) {
                            out.objectness += bce(z(4), 0.0);
                        }
                    }
                }
            }
        }
    }
    let k = 1.0 / n as f64;
    RefLoss {
        box_loss: out.box_loss * k,
        objectness: out.objectness * k,
        class: out.class * k,
    }
}
