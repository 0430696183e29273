//! Named parameter storage shared by every module of the network.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ParamId, Tape, Var};
use crate::tensor::Matrix;

/// Flat registry of named learnable matrices.
///
/// Names are dotted paths (`atomic.ta.w_q`); the first segment names the
/// module group, which gradient checking uses to sample per-module.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| &self.values[id])
    }

    pub fn set(&mut self, name: &str, value: Matrix) {
        let id = self.id(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(self.values[id].shape(), value.shape(), "shape change for `{name}`");
        self.values[id] = value;
    }

    /// Parameter leaf on `tape`.
    pub fn var(&self, tape: &Tape, id: ParamId) -> Var {
        tape.param(id, &self.values[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (i, n.as_str(), v))
    }

    /// Ids whose name starts with `prefix.`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        let dotted = format!("{prefix}.");
        self.names.iter().enumerate().filter(|(_, n)| n.starts_with(&dotted)).map(|(i, _)| i).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Dense affine layer `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, d_in, d_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, d_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let y = tape.matmul(x, store.var(tape, self.weight));
        match self.bias {
            Some(b) => tape.add_row(y, store.var(tape, b)),
            None => y,
        }
    }

    pub fn dims(&self, store: &ParamStore) -> (usize, usize) {
        store.get(self.weight).shape()
    }
}

/// Learnable gain and shift applied after row standardization.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        assert!(eps > 0.0, "layer norm epsilon must be positive");
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0));
        let shift = store.add(format!("{name}.shift"), Matrix::zeros(1, dim));
        Self { gain, shift, eps }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let z = tape.layer_norm_rows(x, self.eps);
        let z = tape.mul_row(z, store.var(tape, self.gain));
        tape.add_row(z, store.var(tape, self.shift))
    }
}
