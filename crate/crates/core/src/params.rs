//! Named parameter storage shared by every trainable module.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// How a parameter is counted in complexity reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// A weight matrix or projection vector.
    Weight,
    Bias,
    /// A lookup table (entity types, clusters, distance bins, relation types).
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Matrix,
    pub trainable: bool,
}

/// Flat, ordered collection of parameters. Insertion order is the
/// serialization order and the reduction order for gradient norms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, kind, value, trainable: true });
        ParamId(self.entries.len() - 1)
    }

    /// Weight of shape `fan_in × fan_out`, uniform in `±1/√fan_in`.
    pub fn weight<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let m = uniform_fan_in(rng, fan_in, fan_out);
        self.add(name, ParamKind::Weight, m)
    }

    /// As [`ParamStore::weight`] with the bound multiplied by `gain`
    /// (`√6` keeps activations from shrinking through rectified layers).
    pub fn weight_with_gain<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> ParamId {
        let m = uniform_fan_in(rng, fan_in, fan_out).scale(gain);
        self.add(name, ParamKind::Weight, m)
    }

    /// Zero bias row of width `n`.
    pub fn bias(&mut self, name: impl Into<String>, n: usize) -> ParamId {
        self.add(name, ParamKind::Bias, Matrix::zeros(1, n))
    }

    /// Lookup table with `rows` entries of width `dim`, uniform in `±1/√dim`.
    pub fn table<R: Rng>(&mut self, name: impl Into<String>, rows: usize, dim: usize, rng: &mut R) -> ParamId {
        let mut m = uniform_fan_in(rng, dim, rows);
        m = m.transpose();
        self.add(name, ParamKind::Table, m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    /// Copies values for every name present in both stores.
    pub fn copy_shared_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(id) = other.find(&e.name) {
                let src = other.get(id);
                if src.shape() == e.value.shape() {
                    e.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Number of scalar entries whose name starts with `prefix`, split into
    /// (weights, biases, tables).
    pub fn count_prefix(&self, prefix: &str) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            match e.kind {
                ParamKind::Weight => counts.0 += e.value.len(),
                ParamKind::Bias => counts.1 += e.value.len(),
                ParamKind::Table => counts.2 += e.value.len(),
            }
        }
        counts
    }
}

/// Uniform initialization scaled by fan-in.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::from_vec(fan_in, fan_out, data)
}
