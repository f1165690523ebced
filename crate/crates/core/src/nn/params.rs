//! Flat parameter storage with named, shaped slots.
//!
//! All learnable tensors of a network live in one contiguous `Vec<f64>`;
//! layers hold [`ParamId`] handles. Gradients and optimiser moments are plain
//! vectors of the same length, which keeps checkpointing, Adam and gradient
//! checking uniform across layer types.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Initialisation rule for a freshly registered tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.values.len();
        match init {
            Init::Zeros => self.values.resize(offset + len, 0.0),
            Init::Ones => self.values.resize(offset + len, 1.0),
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                self.values.extend((0..len).map(|_| rng.random_range(-bound..bound)));
            }
        }
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        let e = &self.entries[id.0];
        e.offset..e.offset + e.len
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[self.range(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.range(id);
        &mut self.values[r]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    /// True when both stores have the same names, shapes and offsets.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries == other.entries
    }

    /// Replaces all values; the layout must match exactly.
    pub fn load_values(&mut self, values: &[f64]) -> bool {
        if values.len() != self.values.len() {
            return false;
        }
        self.values.copy_from_slice(values);
        true
    }
}

/// Mutable view of the gradient slot belonging to a parameter.
pub fn grad_slot<'a>(store: &ParamStore, grads: &'a mut [f64], id: ParamId) -> &'a mut [f64] {
    &mut grads[store.range(id)]
}

/// Two disjoint mutable gradient slots (weight and bias of one layer).
pub fn grad_pair<'a>(store: &ParamStore, grads: &'a mut [f64], a: ParamId, b: ParamId) -> (&'a mut [f64], &'a mut [f64]) {
    let ra = store.range(a);
    let rb = store.range(b);
    assert!(ra.end <= rb.start || rb.end <= ra.start, "overlapping gradient slots");
    if ra.start < rb.start {
        let (lo, hi) = grads.split_at_mut(rb.start);
        (&mut lo[ra], &mut hi[..rb.end - rb.start])
    } else {
        let (lo, hi) = grads.split_at_mut(ra.start);
        let b_slice = &mut lo[rb];
        (&mut hi[..ra.end - ra.start], b_slice)
    }
}
