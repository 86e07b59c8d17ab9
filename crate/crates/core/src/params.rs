use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Owner of every learnable tensor of a model. Ids are never reused, so
/// iteration order (by id) is creation order and stays deterministic across
/// expert additions and removals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    next: u64,
    params: BTreeMap<ParamId, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.next);
        self.next += 1;
        self.params.insert(
            id,
            Param {
                name: name.into(),
                value,
            },
        );
        id
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape, data).expect("shape/data agree"))
    }

    pub(crate) fn insert_with_id(&mut self, id: ParamId, name: String, value: Tensor) {
        self.next = self.next.max(id.0 + 1);
        self.params.insert(id, Param { name, value });
    }

    pub(crate) fn next_id(&self) -> u64 {
        self.next
    }

    pub(crate) fn set_next_id(&mut self, next: u64) {
        self.next = self.next.max(next);
    }

    pub fn get(&self, id: ParamId) -> Option<&Param> {
        self.params.get(&id)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[&id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params.get_mut(&id).expect("unknown parameter").value
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param> {
        self.params.remove(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.params.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over ids, shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        self.digest_of(self.ids())
    }

    pub fn digest_of(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let p = &self.params[&id];
            h.update(id.0.to_le_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: ParamId, grad: Vec<f64>) {
        self.grads.insert(id, grad);
    }

    /// Elementwise sum; parameters present on only one side are carried over.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(mine) => mine.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        self.grads.retain(|id, _| keep(*id));
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
