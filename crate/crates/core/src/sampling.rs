//! Seeded sampling shared by corpus sampling and annotation sessions.
//!
//! The scheme is fixed so that any other implementation can reproduce a
//! selection from `(n, k, seed)` alone:
//!
//! 1. Generator: SplitMix64 with its 64-bit state initialised to `seed`.
//!    Each draw adds `0x9E3779B97F4A7C15` to the state and returns the
//!    standard SplitMix64 finaliser of the new state.
//! 2. Bounded draw `below(bound)`: let `threshold = (2^64 - bound) mod bound`;
//!    draw `r` until `r >= threshold`, return `r mod bound`.
//! 3. Selection: start from `idx = [0, 1, .., n-1]`. For `i` in `0..k` draw
//!    `j = i + below(n - i)` and swap `idx[i]` with `idx[j]`.
//! 4. The first `k` entries are sorted ascending, restoring input order.
//!
//! `shuffle` uses the same generator with the classic descending
//! Fisher–Yates loop: for `i` from `len-1` down to `1`, swap `i` with
//! `below(i + 1)`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

/// Deterministic generator behind every sampled artifact in the crate.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: SplitMix64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Unbiased draw from `0..bound`. `bound` must be non-zero.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Uniform draw from `[0, 1)` using the top 53 bits.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Picks `k` distinct indices out of `0..n`, returned ascending.
///
/// Returns `None` when `k > n`.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Option<Vec<usize>> {
    if k > n {
        return None;
    }
    let mut rng = SeededRng::new(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    Some(idx)
}

/// In-place seeded Fisher–Yates shuffle.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = SeededRng::new(seed);
    for i in (1..items.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        items.swap(i, j);
    }
}
