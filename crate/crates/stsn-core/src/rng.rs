//! Deterministic pseudo-random streams.
//!
//! A SplitMix64 generator is enough for data synthesis, weight init, shuffles
//! and Gumbel noise, and keeps every run bit-reproducible across platforms
//! (no dependency on an external RNG crate whose stream might change between
//! versions). Streams are forked hierarchically: the training loop forks one
//! child per epoch, each epoch forks one child per batch.

use crate::fmath;

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 stream.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derives an independent stream for a named purpose (init, shuffle, ...).
    /// The label keeps consumers from aliasing each other when they share a
    /// root seed.
    pub fn stream(seed: u64, label: u64) -> Self {
        let mut r = Rng::new(seed ^ label.wrapping_mul(GAMMA));
        r.next_u64();
        r
    }

    /// Child stream seeded from the parent's next output. Fork order is part
    /// of the reproducibility contract.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64() ^ GAMMA)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in the half-open interval [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval (0, 1); safe as a log argument.
    pub fn next_open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Standard Gumbel(0, 1) sample: -ln(-ln U).
    pub fn gumbel(&mut self) -> f64 {
        -fmath::ln(-fmath::ln(self.next_open_f64()))
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        if xs.len() < 2 {
            return;
        }
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
