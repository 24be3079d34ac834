//! Seeded generator used for every random draw in the crate.
//!
//! The stream is ChaCha20 (20 rounds, 64-bit block counter, 64-bit stream id)
//! keyed with the little-endian seed bytes followed by 24 zero bytes. With
//! seed 0 the first 64-bit word is the first eight bytes of the well-known
//! all-zero-key ChaCha20 block `76 b8 e0 ad a0 f1 3d 90 ...`, read little
//! endian. Child generators are keyed by a SplitMix64 mix of the parent seed
//! and a child index, so independent tasks never share a stream.
//!
//! Conversions from raw words are done here rather than through `rand`
//! distributions so that the draw sequence is pinned by this file alone:
//! uniforms use the top 53 bits, integers use rejection sampling, normals use
//! the cosine branch of Box-Muller.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self { seed, inner: ChaCha20Rng::from_seed(key) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seed of the `index`-th child of a generator seeded with `seed`.
    pub fn child_seed(seed: u64, index: u64) -> u64 {
        splitmix64(seed ^ splitmix64(index))
    }

    /// Independent generator for sub-task `index`. Does not advance `self`.
    pub fn derive(&self, index: u64) -> Rng {
        Rng::new(Self::child_seed(self.seed, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        // 1 - u lies in (0, 1], so the log is finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Vector of `n` standard normals.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}
