use std::collections::HashMap;

use crate::params::{ParamId, ParamKind, ParamStore, Tensor};

/// Adaptive-moment optimiser with a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// First and second moments, indexed like the parameter store.
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor, Tensor)> {
        self.moments.get(id.0).and_then(|m| m.as_ref())
    }

    pub(crate) fn restore(&mut self, step: u64, moments: Vec<Option<(Tensor, Tensor)>>) {
        self.step = step;
        self.moments = moments;
    }

    /// One update. Parameters without a gradient are left untouched; when
    /// `clip_norm` is set the joint gradient is rescaled to at most that norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>, clip_norm: Option<f64>) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let scale = match clip_norm {
            Some(max) => {
                let norm = grads
                    .values()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let mut ids: Vec<ParamId> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            if store.kind(id) != ParamKind::Trainable {
                continue;
            }
            let g = &grads[&id];
            let slot = &mut self.moments[id.0];
            let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(g.raw_dim()), Tensor::zeros(g.raw_dim())));
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new(0);
        let w = store.constant("w", &[2], 1.0);
        let mut adam = Adam::new(0.1);
        let mut grads = HashMap::new();
        grads.insert(w, ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, -0.5]).unwrap());
        adam.step(&mut store, &grads, None);
        let v = store.get(w);
        assert!((v[[0]] - 0.9).abs() < 1e-6);
        assert!((v[[1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new(0);
        let w = store.constant("w", &[1], 5.0);
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let x = store.get(w)[[0]];
            let mut grads = HashMap::new();
            grads.insert(w, ArrayD::from_elem(IxDyn(&[1]), 2.0 * (x - 2.0)));
            adam.step(&mut store, &grads, None);
        }
        assert!((store.get(w)[[0]] - 2.0).abs() < 1e-2);
    }
}
