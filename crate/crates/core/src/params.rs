//! Named parameter storage shared by every block and by the checkpoint format.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{MarsError, Result};

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; updated only by train-mode batch norm.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Generator seeded from `sha256(seed || key)`.
pub(crate) fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(s)
}

/// Flat, ordered table of named tensors.
///
/// Initialisation draws each tensor from its own generator keyed by
/// `(seed, name)`, so a parameter shared by two architecture variants gets
/// the same initial values in both.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        keyed_rng(self.seed, name)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let mut rng = self.rng_for(name);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                if bound == 0.0 {
                    0.0
                } else {
                    rng.random_range(-bound..=bound)
                }
            })
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product agree");
        self.insert(name, ParamKind::Trainable, value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.insert(name, ParamKind::Trainable, ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.insert(name, ParamKind::Buffer, ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replace a tensor's contents; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(MarsError::Structural(format!(
                "parameter {} has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Bound of the fan-in scaled uniform initialiser (unit output variance for unit inputs).
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamStore::new(3);
        let x = a.uniform("x", &[4, 4], 1.0);
        let y = a.uniform("y", &[4], 1.0);
        let mut b = ParamStore::new(3);
        let y2 = b.uniform("y", &[4], 1.0);
        let x2 = b.uniform("x", &[4, 4], 1.0);
        assert_eq!(a.get(x), b.get(x2));
        assert_eq!(a.get(y), b.get(y2));
        let mut c = ParamStore::new(4);
        let x3 = c.uniform("x", &[4, 4], 1.0);
        assert_ne!(a.get(x), c.get(x3));
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::new(0);
        let w = s.constant("w", &[2, 3], 0.0);
        assert!(s.set(w, ArrayD::zeros(IxDyn(&[3, 2]))).is_err());
        assert!(s.set(w, ArrayD::ones(IxDyn(&[2, 3]))).is_ok());
        assert_eq!(s.num_trainable(), 6);
    }
}
