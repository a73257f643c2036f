//! Deterministic PRNG: SplitMix64 with Box-Muller normals.
//!
//! The generator is fixed by the on-disk contract of this project: every
//! training run, noise buffer and acceptance number is reproducible from a
//! seed. SplitMix64 steps the state by the golden-ratio increment
//! 0x9E3779B97F4A7C15 and mixes with the Stafford mix13 constants
//! (0xBF58476D1CE4E5B9, 0x94D049BB133111EB). Normals are produced by
//! Box-Muller over f64 uniforms and cast down, so the f32 stream is the
//! rounded f64 stream.
//!
//! `keyed` derives an independent stream from (seed, stream id); the
//! streaming engine keys noise by latent frame index so that online
//! generation and offline replay consume identical noise.

use crate::num::scalar::Scalar;
use crate::num::tensor::Tensor;

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    /// Cached second Box-Muller deviate.
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            spare: None,
        }
    }

    /// Independent stream addressed by (seed, stream). Streams with
    /// different ids decorrelate through the mix function.
    pub fn keyed(seed: u64, stream: u64) -> Self {
        Rng {
            state: mix(seed ^ mix(stream.wrapping_mul(GOLDEN).wrapping_add(1))),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; deviates come in cached pairs.
    pub fn normal_f64(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // u1 in (0, 1] so the log is finite
        let u1 = 1.0 - self.uniform_f64();
        let u2 = self.uniform_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_f32(&mut self) -> f32 {
        self.normal_f64() as f32
    }

    pub fn normal<S: Scalar>(&mut self) -> S {
        S::from_f64c(self.normal_f64())
    }

    /// i.i.d. N(0,1) tensor.
    pub fn randn<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        Tensor::from_fn(shape, |_| self.normal::<S>())
    }

    /// Kaiming-ish init for a (fan_in, fan_out) weight: N(0, 1/fan_in).
    pub fn init_weight<S: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<S> {
        let std = (1.0 / fan_in as f64).sqrt();
        Tensor::from_fn(&[fan_in, fan_out], |_| S::from_f64c(self.normal_f64() * std))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ta: Tensor<f32> = Rng::new(9).randn(&[3, 5]);
        let tb: Tensor<f32> = Rng::new(9).randn(&[3, 5]);
        assert_eq!(ta, tb);
    }

    #[test]
    fn different_seeds_differ() {
        let a: Tensor<f32> = Rng::new(1).randn(&[8]);
        let b: Tensor<f32> = Rng::new(2).randn(&[8]);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn keyed_streams_decorrelate() {
        let a: Tensor<f32> = Rng::keyed(7, 0).randn(&[8]);
        let b: Tensor<f32> = Rng::keyed(7, 1).randn(&[8]);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
        let a2: Tensor<f32> = Rng::keyed(7, 0).randn(&[8]);
        assert_eq!(a, a2);
    }

    #[test]
    fn normal_moments() {
        // 1e5 samples: |mean| < 0.02, |var - 1| < 0.03
        let mut rng = Rng::new(123);
        let n = 100_000;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let x = rng.normal_f64();
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn uniform_range() {
        let mut rng = Rng::new(5);
        for _ in 0..1000 {
            let u = rng.uniform_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
