#![allow(dead_code)]

pub mod oracles;

use pcmnet::config::Config;
use pcmnet::feature_store::{generate_synthetic, Dataset, Dims, SynthConfig};
use pcmnet::tensor::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Narrow model for fast end-to-end tests.
pub fn small_config() -> Config {
    let mut cfg = Config::default();
    let m = &mut cfg.model;
    m.d_enc = 16;
    m.n_heads = 2;
    m.d_pol = 4;
    m.d_pol_hidden = 16;
    m.d_z = 8;
    m.d_a = 8;
    cfg
}

/// Width and step size used by the synthetic end-to-end runs.
pub fn synthetic_run_config() -> Config {
    let mut cfg = Config::default();
    let m = &mut cfg.model;
    m.d_enc = 32;
    m.n_heads = 4;
    m.d_pol = 8;
    m.d_pol_hidden = 32;
    m.d_z = 32;
    m.d_a = 32;
    cfg.train.lr = 1e-3;
    cfg
}

pub fn small_dims() -> Dims {
    Dims { l_t: 4, l_a: 3, l_v: 2, k: 2, d_t: 5, d_a: 4, d_v: 3, j: 2 }
}

pub fn synth(n: usize, noise: f64, seed: u64, dims: Dims) -> Dataset {
    generate_synthetic(&SynthConfig { n_samples: n, noise_std: noise, seed, dims, ..SynthConfig::default() }).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
