//! Portable seeded sampling.
//!
//! The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64`,
//! whose output stream is fixed by `rand_core`. Bounded integers use plain
//! rejection: draw `x = next_u64()` until `x < n * floor(2^64 / n)` and
//! return `x mod n`. Samples without replacement are the first `k` slots of
//! a Fisher–Yates pass that swaps slot `i` with `i + below(n - i)`.
//! Together these make every sample reproducible from the seed alone.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for a class's private stream: `seed XOR fnv1a64(class_id)`.
pub fn class_stream_seed(seed: u64, class_id: &str) -> u64 {
    seed ^ fnv1a64(class_id.as_bytes())
}

pub struct SampleRng(ChaCha8Rng);

impl SampleRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn for_class(seed: u64, class_id: &str) -> Self {
        Self::new(class_stream_seed(seed, class_id))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        let n = n as u64;
        let zone = (u64::MAX / n) * n;
        loop {
            let x = self.0.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// `k` distinct indices of `0..n` in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in 0..items.len() {
            let j = i + self.below(items.len() - i);
            items.swap(i, j);
        }
    }
}
