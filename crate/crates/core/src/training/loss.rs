use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::targets::TargetAssignment;
use crate::blocks::DomainDistribution;
use crate::detector::RawPrediction;
use crate::error::{MarsError, Result};
use crate::graph::{sigmoid_scalar, Graph, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub box_loss: f64,
    pub objectness_loss: f64,
    pub class_loss: f64,
    pub domain_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn detection(&self) -> f64 {
        self.box_loss + self.objectness_loss + self.class_loss
    }

    pub fn with_domain(mut self, domain_loss: f64, weight: f64) -> Self {
        self.domain_loss = domain_loss;
        self.total = self.detection() + weight * domain_loss;
        self
    }

    pub fn is_finite(&self) -> bool {
        [
            self.box_loss,
            self.objectness_loss,
            self.class_loss,
            self.domain_loss,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `-log sigmoid(z)` if `y = 1`, `-log(1 - sigmoid(z))` if `y = 0`, in the
/// numerically stable softplus form.
fn bce_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// Loss value and gradient with respect to every raw output.
pub(crate) fn detection_loss_with_grad(
    raw: [&ArrayD<f64>; 3],
    t: &TargetAssignment,
    num_classes: usize,
) -> Result<(LossBreakdown, [ArrayD<f64>; 3])> {
    let per = 5 + num_classes;
    let n = t.batch_size();
    let inv_n = 1.0 / n.max(1) as f64;
    let mut lb = LossBreakdown::default();
    let mut grads: Vec<ArrayD<f64>> = Vec::with_capacity(3);
    for (s, st) in t.scales.iter().enumerate() {
        let r = raw[s];
        let g = st.objectness.shape()[2];
        if r.shape() != [n, 3 * per, g, g] {
            return Err(MarsError::Structural(format!(
                "scale {s}: raw shape {:?} does not match targets [{n}, {}, {g}, {g}]",
                r.shape(),
                3 * per
            )));
        }
        let mut d = ArrayD::<f64>::zeros(IxDyn(r.shape()));
        for b in 0..n {
            for a in 0..3 {
                let base = a * per;
                for i in 0..g {
                    for j in 0..g {
                        let zo = r[[b, base + 4, i, j]];
                        if st.objectness[[b, a, i, j]] > 0.0 {
                            for k in 0..2 {
                                let z = r[[b, base + k, i, j]];
                                let p = sigmoid_scalar(z);
                                let diff = p - st.boxes[[b, a, k, i, j]];
                                lb.box_loss += diff * diff * inv_n;
                                d[[b, base + k, i, j]] = 2.0 * diff * p * (1.0 - p) * inv_n;
                            }
                            for k in 2..4 {
                                let diff = r[[b, base + k, i, j]] - st.boxes[[b, a, k, i, j]];
                                lb.box_loss += diff * diff * inv_n;
                                d[[b, base + k, i, j]] = 2.0 * diff * inv_n;
                            }
                            lb.objectness_loss += bce_logits(zo, 1.0) * inv_n;
                            d[[b, base + 4, i, j]] = (sigmoid_scalar(zo) - 1.0) * inv_n;
                            for c in 0..num_classes {
                                let z = r[[b, base + 5 + c, i, j]];
                                let y = st.classes[[b, a, c, i, j]];
                                lb.class_loss += bce_logits(z, y) * inv_n;
                                d[[b, base + 5 + c, i, j]] = (sigmoid_scalar(z) - y) * inv_n;
                            }
                        } else if st.ignore[[b, a, i, j]] == 0.0 {
                            lb.objectness_loss += bce_logits(zo, 0.0) * inv_n;
                            d[[b, base + 4, i, j]] = sigmoid_scalar(zo) * inv_n;
                        }
                    }
                }
            }
        }
        grads.push(d);
    }
    lb.total = lb.detection();
    let [g0, g1, g2]: [ArrayD<f64>; 3] = grads.try_into().expect("three scales");
    Ok((lb, [g0, g1, g2]))
}

/// Detection loss on materialised predictions.
///
/// Box loss is the squared error of `(sigmoid(tx), sigmoid(ty), tw, th)`
/// against the targets on responsible anchors; objectness is binary cross
/// entropy on every non-ignored anchor; class loss is per-class binary cross
/// entropy on responsible anchors. Sums are divided by the batch size.
pub fn detection_loss(raw: &RawPrediction, t: &TargetAssignment) -> Result<LossBreakdown> {
    let nc = t.scales[0].classes.shape()[2];
    let r = [&raw.scales[0], &raw.scales[1], &raw.scales[2]];
    Ok(detection_loss_with_grad(r, t, nc)?.0)
}

/// Graph node for the detection loss over the three raw output nodes.
pub fn detection_loss_graph(
    g: &mut Graph,
    raw: [Var; 3],
    t: &TargetAssignment,
) -> Result<(Var, LossBreakdown)> {
    let nc = t.scales[0].classes.shape()[2];
    let (lb, grads) = {
        let r = [g.value(raw[0]), g.value(raw[1]), g.value(raw[2])];
        detection_loss_with_grad(r, t, nc)?
    };
    let v = ArrayD::from_elem(IxDyn(&[]), lb.total);
    let node = g.custom(&raw, v, move |_, up| {
        let k = up.sum();
        grads.iter().map(|d| d * k).collect()
    });
    Ok((node, lb))
}

/// Mean over scales of `-ln p[label]`.
pub fn domain_loss(per_scale: &[DomainDistribution], label: usize) -> Result<f64> {
    if per_scale.is_empty() {
        return Err(MarsError::Data(
            "domain loss needs at least one distribution".into(),
        ));
    }
    let mut total = 0.0;
    for d in per_scale {
        if label >= d.len() {
            return Err(MarsError::Data(format!(
                "domain label {label} out of range for {} domains",
                d.len()
            )));
        }
        total -= d.probs[label].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / per_scale.len() as f64)
}

/// Cross-entropy from logits `[N, K]` per scale, averaged over scales and batch.
pub fn domain_loss_graph(g: &mut Graph, logits: &[Var], labels: &[usize]) -> Result<Var> {
    let mut terms = Vec::with_capacity(logits.len());
    for &l in logits {
        let (n, k) = match g.shape(l) {
            &[n, k] => (n, k),
            s => {
                return Err(MarsError::Structural(format!(
                    "domain logits must be [N, K], got {s:?}"
                )))
            }
        };
        if n != labels.len() {
            return Err(MarsError::Structural(format!(
                "{n} domain predictions for {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(MarsError::Data(format!(
                "domain label {bad} out of range for {k} domains"
            )));
        }
        let z = g.value(l).as_slice().expect("standard layout").to_vec();
        let mut loss = 0.0;
        let mut grad = vec![0.0; n * k];
        for (b, &y) in labels.iter().enumerate() {
            let row = &z[b * k..(b + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += (lse - row[y]) / n as f64;
            for c in 0..k {
                grad[b * k + c] = ((row[c] - lse).exp() - if c == y { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        let gt = ArrayD::from_shape_vec(IxDyn(&[n, k]), grad).expect("shape");
        terms.push(g.custom(&[l], ArrayD::from_elem(IxDyn(&[]), loss), move |_, up| {
            vec![&gt * up.sum()]
        }));
    }
    let k = 1.0 / terms.len() as f64;
    let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, k)).collect();
    Ok(g.combine(&weighted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_loss_examples() {
        let uniform = DomainDistribution::new(vec![1.0 / 7.0; 7]).unwrap();
        let l = domain_loss(&[uniform.clone(), uniform.clone(), uniform], 3).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        assert!((l - 1.945910).abs() < 1e-6);

        let d = DomainDistribution::new(vec![0.7, 0.1, 0.05, 0.05, 0.05, 0.025, 0.025]).unwrap();
        assert!((domain_loss(std::slice::from_ref(&d), 0).unwrap() - 0.356675).abs() < 1e-6);
        assert!(matches!(domain_loss(&[d], 7), Err(MarsError::Data(_))));

        let mut p = vec![0.0; 7];
        p[2] = 1.0;
        let one_hot = DomainDistribution::new(p).unwrap();
        assert_eq!(domain_loss(&[one_hot], 2).unwrap(), 0.0);
    }

    #[test]
    fn domain_loss_graph_matches_probabilities() {
        let mut g = Graph::new();
        let logits =
            g.input(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.1, 2.0, -1.0, 0.5, 0.5, 0.3]).unwrap());
        let loss = domain_loss_graph(&mut g, &[logits], &[1, 2]).unwrap();
        let row = |a: [f64; 3], y: usize| {
            let s: f64 = a.iter().map(|v| v.exp()).sum();
            -(a[y].exp() / s).ln()
        };
        let expected = (row([0.1, 2.0, -1.0], 1) + row([0.5, 0.5, 0.3], 2)) / 2.0;
        assert!((g.value(loss).sum() - expected).abs() < 1e-12);
        assert!(domain_loss_graph(&mut g, &[logits], &[1, 3]).is_err());
    }

    #[test]
    fn bce_is_stable() {
        assert!(bce_logits(1000.0, 1.0).abs() < 1e-12);
        assert!((bce_logits(-1000.0, 1.0) - 1000.0).abs() < 1e-9);
        assert!((bce_logits(0.0, 0.0) - 2f64.ln()).abs() < 1e-12);
    }
}
