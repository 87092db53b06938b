#![allow(dead_code)]

use hmsv_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Probabilities in `[0.05, 0.95]` on a grid of distinct levels, so no two
/// pixels are within finite-difference reach of a pooling tie.
pub fn tie_free_probs(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| 0.05 + 0.9 * i as f64 / (n - 1).max(1) as f64)
        .collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

pub fn binary(shape: &[usize], density: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| (rng.random::<f64>() < density) as u8 as f64)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `[1, 1, h, w]` map with ones on row `row` between `c0` and `c1` inclusive.
pub fn hline(h: usize, w: usize, row: usize, c0: usize, c1: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[1, 1, h, w]);
    for c in c0..=c1 {
        t.data_mut()[row * w + c] = 1.0;
    }
    t
}
