//! Adam with decoupled weight decay.

use crate::autograd::Gradients;
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-parameter step counts; a parameter only advances when it
    /// receives a gradient.
    pub steps: Vec<u64>,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols())).collect::<Vec<_>>();
        Self { lr, beta1, beta2, eps, weight_decay, steps: vec![0; store.len()], m: zeros(), v: zeros() }
    }

    /// Parameters absent from `grads` are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let mut ids: Vec<_> = grads.params().keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            let g = &grads.params()[&id];
            self.steps[id] += 1;
            let t = self.steps[id] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = store.get_mut(id);
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let update = (m.data()[k] / c1) / ((v.data()[k] / c2).sqrt() + self.eps);
                let w = &mut p.data_mut()[k];
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}
