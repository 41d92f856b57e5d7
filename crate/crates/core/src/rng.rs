//! Deterministic random number generation.
//!
//! All randomness flows through [`Rng`], a thin wrapper over ChaCha8
//! (`rand_chacha::ChaCha8Rng`), a counter-based stream cipher generator whose
//! output is specified bit-for-bit and therefore identical across platforms.
//! The platform/thread RNG is never used.
//!
//! Child generators are derived from `(seed, stream index)` pairs, so parallel
//! code can hand each worker its own generator without sharing state.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for stream `index`, a pure function of
    /// `(self.seed, index)` and untouched by how much `self` has been used.
    pub fn child(&self, index: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(index.wrapping_add(1));
        let seed = inner.random::<u64>();
        Rng::new(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Fills `out` with uniform 32-bit words. Bulk draws come from a
    /// xoshiro256++ generator seeded by one draw of this stream, which is
    /// several times faster than ChaCha8 and just as reproducible.
    pub fn fill_u32(&mut self, out: &mut [u32]) {
        let mut fast = Xoshiro256PlusPlus::seed_from_u64(self.next_u64());
        for chunk in out.chunks_mut(2) {
            let r = fast.next_u64();
            chunk[0] = r as u32;
            if let Some(hi) = chunk.get_mut(1) {
                *hi = (r >> 32) as u32;
            }
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn children_are_stable_and_distinct() {
        let mut parent = Rng::new(3);
        let c0 = parent.child(0);
        parent.next_u64();
        assert_eq!(c0.seed(), parent.child(0).seed());
        assert_ne!(parent.child(0).seed(), parent.child(1).seed());
    }

    #[test]
    fn known_first_output() {
        // Pins the generator so an accidental algorithm swap is caught.
        assert_eq!(Rng::new(0).next_u64(), 13080132717333068652);
        assert_ne!(Rng::new(0).next_u64(), Rng::new(1).next_u64());
    }
}
