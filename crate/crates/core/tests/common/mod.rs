#![allow(dead_code)]

use cmfn_core::params::ParamStore;
use cmfn_core::{Cmfn, ModelConfig};
use cmfn_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Overwrites every parameter (biases and norm affines included) with
/// uniform noise so tests do not sit on the zero-bias initialization.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x = r.random_range(-scale..scale));
        if p.name.ends_with(".gain") {
            p.value.data_mut().iter_mut().for_each(|x| *x += 1.0);
        }
    }
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

/// Random row-stochastic `rows × cols` matrix.
pub fn random_distribution(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut t = random_tensor(&[rows, cols], seed, 0.01, 1.0);
    for r in 0..rows {
        let row = &mut t.data_mut()[r * cols..(r + 1) * cols];
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

pub fn tiny_model(seed: u64) -> Cmfn {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::tiny()
    };
    let mut m = Cmfn::new(&cfg).unwrap();
    randomize(&mut m.store, seed.wrapping_add(1000), 0.5);
    m
}

pub fn row_mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}
