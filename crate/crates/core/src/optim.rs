//! Adam with bias correction and global-norm gradient clipping.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// First and second moment estimates, indexed by parameter id.
    pub fn moments(&self) -> (&[Option<Matrix>], &[Option<Matrix>]) {
        (&self.first, &self.second)
    }

    /// Replaces the moment estimates, e.g. when resuming from a checkpoint.
    pub fn set_moments(&mut self, first: Vec<Option<Matrix>>, second: Vec<Option<Matrix>>) {
        self.first = first;
        self.second = second;
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let n = store.len();
        if self.first.len() < n {
            self.first.resize(n, None);
            self.second.resize(n, None);
        }
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for (id, g) in grads.iter() {
            if !store.entry(id).trainable {
                continue;
            }
            let (r, c) = g.shape();
            let m = self.first[id.0].get_or_insert_with(|| Matrix::zeros(r, c));
            let v = self.second[id.0].get_or_insert_with(|| Matrix::zeros(r, c));
            let p = store.get_mut(id);
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let mh = mk / c1;
                let vh = vk / c2;
                p.data_mut()[k] -= self.learning_rate * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

/// Rescales `grads` so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::ParamKind;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamKind::Weight, Matrix::from_rows(&[alloc::vec![1.0, -2.0]]));
        let mut tape = Tape::new(&store);
        let x = tape.param(id);
        let sq = tape.mul(x, x);
        let l = tape.sum_all(sq);
        let g = tape.backward(l);
        let mut adam = Adam::new(0.1);
        adam.update(&mut store, &g);
        // Bias-corrected first step is lr · sign(g) up to eps.
        assert!((store.get(id).get(0, 0) - 0.9).abs() < 1e-7);
        assert!((store.get(id).get(0, 1) + 1.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamKind::Weight, Matrix::from_rows(&[alloc::vec![3.0, -4.0]]));
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let g = {
                let mut tape = Tape::new(&store);
                let x = tape.param(id);
                let sq = tape.mul(x, x);
                let l = tape.sum_all(sq);
                tape.backward(l)
            };
            adam.update(&mut store, &g);
        }
        assert!(store.get(id).norm_sq() < 1e-6);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamKind::Weight, Matrix::from_rows(&[alloc::vec![1.0]]));
        let mut tape = Tape::new(&store);
        let x = tape.param(id);
        let l = tape.sum_all(x);
        let g = tape.backward(l);
        store.set_trainable(id, false);
        Adam::new(0.1).update(&mut store, &g);
        assert_eq!(store.get(id).get(0, 0), 1.0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamKind::Weight, Matrix::from_rows(&[alloc::vec![3.0, 4.0]]));
        let mut tape = Tape::new(&store);
        let x = tape.param(id);
        let sq = tape.mul(x, x);
        let l = tape.sum_all(sq);
        let mut g = tape.backward(l);
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        let again = clip_global_norm(&mut g, 5.0);
        assert!((again - 1.0).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
