#![allow(dead_code)]

use hdmba::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn param(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::parameter(shape, rand_vec(rng, n, lo, hi)).unwrap()
}

/// Largest relative error between the analytic and the central-difference
/// gradient of `f` with respect to every element of every input.
pub fn max_grad_error(inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>, h: f64) -> f64 {
    inputs.iter().for_each(|t| t.zero_grad());
    let out = f(inputs);
    out.backward().unwrap();
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let eval = |d: f64| {
                let moved: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, x)| {
                        let mut v = x.to_vec();
                        if k == i {
                            v[j] += d;
                        }
                        Tensor::from_vec(x.shape(), v).unwrap()
                    })
                    .collect();
                f(&moved).item().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
