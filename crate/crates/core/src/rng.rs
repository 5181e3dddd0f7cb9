//! Deterministic named random streams.
//!
//! Every random decision in the pipeline draws from a [`Stream`] derived from
//! the root seed by a path of names and indices, e.g.
//! `root.derive("augment").derive_u64(step).derive_u64(subject)`. Streams are
//! pure values: deriving never mutates the parent, so worker scheduling or
//! resume order cannot change what a consumer sees. The generator is
//! SplitMix64, evaluated identically on every platform.

use alloc::vec::Vec;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x1000_0000_01b3;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// A point in the stream tree; cheap to copy, deriving is side-effect free.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stream {
    state: u64,
}

impl Stream {
    pub fn root(seed: u64) -> Self {
        Stream { state: splitmix(seed ^ 0x51ed_270b_8f10_23c5) }
    }

    pub fn derive(&self, tag: &str) -> Stream {
        Stream { state: splitmix(self.state ^ fnv1a(tag.as_bytes())) }
    }

    pub fn derive_u64(&self, n: u64) -> Stream {
        Stream { state: splitmix(self.state ^ splitmix(n ^ 0xa076_1d64_78bd_642f)) }
    }

    pub fn rng(&self) -> Rng {
        Rng { state: splitmix(self.state) }
    }
}

/// SplitMix64 sequence generator.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn uniform_f32(&mut self) -> f32 {
        self.uniform_f64() as f32
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; the second variate of each pair is
    /// discarded to keep the draw count per call fixed.
    pub fn gaussian(&mut self) -> f64 {
        let mut u1 = self.uniform_f64();
        while u1 <= 0.0 {
            u1 = self.uniform_f64();
        }
        let u2 = self.uniform_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        r * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    pub fn gaussian_f32(&mut self, sigma: f32) -> f32 {
        (self.gaussian() * sigma as f64) as f32
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        if xs.is_empty() {
            return;
        }
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices drawn from `0..n` (k <= n), in shuffled order.
    pub fn distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    /// Permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
