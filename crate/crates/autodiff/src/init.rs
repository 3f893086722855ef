//! Parameter initializers. All take the RNG explicitly.

use rand::Rng;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual fan-in scaling
/// for convolution and linear weights.
pub fn kaiming_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(rng, bound, n)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, bound: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}
