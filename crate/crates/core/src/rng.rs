//! Pinned pseudo-random generator used for dataset splits and random search.
//!
//! The generator is PCG-XSH-RR 64/32 (`pcg32`), seeded exactly like the
//! reference `pcg32_srandom_r(state, stream)`. Bounded draws use the
//! reference `pcg32_boundedrand_r` rejection rule and shuffling is a
//! descending Fisher-Yates, so every sequence is reproducible from the
//! algorithm description alone.

use rand_core::RngCore;
use rand_pcg::Pcg32;

/// Name recorded in bundles so other implementations can reproduce splits.
pub const RNG_ALGORITHM: &str = "pcg32-xsh-rr-64/32; bounded=pcg32_boundedrand_r; shuffle=fisher-yates-descending";

/// Stream selector for dataset splitting.
pub const SPLIT_STREAM: u64 = 0x0053_504c_4954;
/// Stream selector for candidate search.
pub const SEARCH_STREAM: u64 = 0x5345_4152_4348;

#[derive(Debug, Clone)]
pub struct PinnedRng {
    inner: Pcg32,
}

impl PinnedRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            inner: Pcg32::new(seed, stream),
        }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    /// Uniform integer in `[0, bound)`. `bound` must be non-zero and fit in u32.
    pub fn below(&mut self, bound: usize) -> usize {
        let bound = u32::try_from(bound).expect("bound exceeds u32");
        assert!(bound > 0, "bound must be positive");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u32();
            if r >= threshold {
                return (r % bound) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
