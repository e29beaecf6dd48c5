//! Seeded pseudo-random source shared by initialisation, data generation and
//! training. Everything random in the crate flows through [`SeededRng`], so a
//! run is a pure function of its seed.

use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg32;

/// PCG-XSH-RR with 64-bit state. Independent streams are selected by the PCG
/// increment, which is how per-sample generators are derived.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: Pcg32,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { inner: Pcg32::new(seed, 0xa02b_dbf7_bb3c_0a7) }
    }

    /// Generator for stream `stream` of `seed`; streams never overlap.
    pub fn stream(seed: u64, stream: u64) -> Self {
        Self { inner: Pcg32::new(seed, stream.wrapping_mul(2).wrapping_add(0x5851_f42d)) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn below(&mut self, lo: usize, hi: usize) -> usize {
        assert!(hi > lo, "empty range {lo}..{hi}");
        self.inner.random_range(lo..hi)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Normal with standard deviation `std`, resampled until it falls in
    /// `[-2 std, 2 std]`.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(0, i + 1);
            items.swap(i, j);
        }
    }
}
