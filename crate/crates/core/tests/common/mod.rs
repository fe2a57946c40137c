#![allow(dead_code)]

use dermo_core::rng;
use dermo_core::Tensor;
use proptest::test_runner::{Config, RngSeed};
use rand::Rng;

/// Proptest config with a fixed seed so failures reproduce across runs.
pub fn cases(n: u32) -> Config {
    Config {
        cases: n,
        rng_seed: RngSeed::Fixed(0x00de_4a0d),
        failure_persistence: None,
        ..Config::default()
    }
}

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `[-2, 2]` kept at least `gap` away from zero.
pub fn away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor {
    uniform(shape, seed, -2.0, 2.0).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
