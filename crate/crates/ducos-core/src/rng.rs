//! Seeded, platform-independent random numbers.
//!
//! All stochastic pieces of the artifact (weight init, scene generation,
//! noise injection, prompt oracle) draw from this wrapper so that a fixed
//! seed reproduces bit-identical results everywhere.

use crate::real::Real;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream, e.g. one per scene or per layer.
    pub fn fork(&mut self, salt: u64) -> Self {
        let s = self.inner.next_u64() ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Rng::seed_from_u64(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform<R: Real>(&mut self, lo: R, hi: R) -> R {
        lo + (hi - lo) * R::from_f64(self.uniform_f64())
    }

    pub fn uniform_usize(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        let span = (hi_inclusive - lo + 1) as u64;
        lo + (self.inner.next_u64() % span) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal_f64(&mut self) -> f64 {
        let mut u1 = self.uniform_f64();
        if u1 < 1e-300 {
            u1 = 1e-300;
        }
        let u2 = self.uniform_f64();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    pub fn normal<R: Real>(&mut self, mean: R, std: R) -> R {
        mean + std * R::from_f64(self.normal_f64())
    }
}
