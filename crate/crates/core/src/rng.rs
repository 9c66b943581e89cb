//! Deterministic random streams.
//!
//! Every stochastic draw in the workspace comes from a [`DetRng`] derived
//! from a master seed plus a domain label (and usually a step/example
//! index). Derivation goes through SHA-256, so streams for different
//! labels are independent and reproducing any point of a run only needs
//! the master seed and the label — no long-lived RNG state has to be
//! carried across steps or threads.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Seeded ChaCha8 stream with convenience samplers.
pub struct DetRng {
    inner: ChaCha8Rng,
}

impl DetRng {
    /// Stream derived from `(seed, label)`.
    pub fn new(seed: u64, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update([0x1f]);
        h.update(label.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        DetRng {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Stream for a per-item draw, e.g. `(seed, "plan_eps", step, index)`.
    pub fn indexed(seed: u64, label: &str, a: u64, b: u64) -> Self {
        Self::new(seed, &format!("{label}/{a}/{b}"))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Vector of standard normal draws.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}
