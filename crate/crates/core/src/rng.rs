//! Named, counter-based random streams.
//!
//! A 64-bit seed is hashed into a 256-bit root key. Child keys are derived as
//! `SHA-256(parent_key || u64_le(len(name)) || name || u64_le(index))`, and
//! each key drives a ChaCha8 keystream addressed by a 64-bit word counter. Two
//! streams with different names never share state, so drawing more values
//! from one stream cannot shift another.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::real::Real;

/// A key in the stream-derivation tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey([u8; 32]);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"s2dm/rng/v1");
        h.update(seed.to_le_bytes());
        StreamKey(h.finalize().into())
    }

    pub fn child(&self, name: &str) -> Self {
        self.indexed(name, 0)
    }

    pub fn indexed(&self, name: &str, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.0);
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(index.to_le_bytes());
        StreamKey(h.finalize().into())
    }

    pub fn bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Generator positioned at word 0 of this key's keystream.
    pub fn rng(&self) -> Rng {
        Rng(ChaCha8Rng::from_seed(self.0))
    }

    /// Generator positioned at an arbitrary word counter.
    pub fn rng_at(&self, word: u64) -> Rng {
        let mut r = ChaCha8Rng::from_seed(self.0);
        r.set_word_pos(word as u128);
        Rng(r)
    }
}

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2^-64 * n.
        ((self.0.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn fill_normal<R: Real>(&mut self, out: &mut [R]) {
        for v in out {
            *v = R::of(self.normal());
        }
    }

    /// Standard normal truncated to `[-2, 2]` by rejection.
    pub fn truncated_normal(&mut self) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z;
            }
        }
    }
}
