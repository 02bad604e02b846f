//! Pinned, versioned random streams.
//!
//! Every random decision in the pipeline (split draws, epoch shuffles,
//! parameter init, dropout masks) goes through [`DetRng`]. The generator is
//! ChaCha8 keyed by `SHA-256(seed || domain)` with the ChaCha stream id set to
//! a caller-supplied index, so distinct purposes never share a stream. Integer
//! and float conversions are implemented here rather than delegated to `rand`
//! so the output is fixed by this crate alone.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Identifier written into every artifact produced from a [`DetRng`] stream.
pub const GENERATOR_ID: &str = "chacha8-sha256-v1";

#[derive(Clone, Debug)]
pub struct DetRng {
    inner: ChaCha8Rng,
}

impl DetRng {
    /// Stream for `(seed, domain, index)`.
    pub fn new(seed: u64, domain: &str, index: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update((domain.len() as u64).to_le_bytes());
        hasher.update(domain.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(index);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..bound` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let wide = u128::from(self.next_u64()) * u128::from(bound);
            if (wide as u64) >= threshold {
                return (wide >> 64) as u64;
            }
        }
    }

    /// Uniform float in `[0, 1)` with 53 random bits.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform float in `[-bound, bound)`.
    pub fn symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.unit_f64() - 1.0) * bound
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// 64-bit FNV-1a, used to fold a language code into a stream index.
pub fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}
