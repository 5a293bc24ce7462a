//! Shared inputs for the criterion benches.

use driftguard::rng;
use rand::Rng;

/// `n` rows of `d` uniform features and a nonlinear target.
pub fn regression(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = rng::seeded(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random::<f64>()).collect()).collect();
    let y = x
        .iter()
        .map(|row| 10.0 * row[0] + 5.0 * (row[1] * row[2 % d]) + (row[d - 1] * 6.0).sin() + r.random::<f64>())
        .collect();
    (x, y)
}

/// Gaussian-ish noise (sum of four uniforms) shifted by `shift`.
pub fn noise(n: usize, shift: f64, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| (0..4).map(|_| r.random::<f64>()).sum::<f64>() - 2.0 + shift)
        .collect()
}
