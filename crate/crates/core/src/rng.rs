//! Counter-based random number generation.
//!
//! Every draw is a pure function of (key, counter), and independent streams
//! are derived by [`Rng::split`] rather than by consuming state. Per-item
//! streams make results identical no matter how work is batched or ordered.

use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; bijective on u64 with good avalanche.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded, splittable generator. Identical seeds give identical streams.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { key: mix(seed), counter: 0 }
    }

    /// Derives an independent stream for sub-task `stream`. Splitting does
    /// not advance `self`, so split layout is independent of draw order.
    pub fn split(&self, stream: u64) -> Self {
        Self {
            key: mix(self.key ^ mix(stream ^ 0xA5A5_A5A5_A5A5_A5A5)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key ^ self.counter.wrapping_mul(GOLDEN))
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; consumes exactly two uniforms.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Tensor of i.i.d. standard normal values.
    pub fn sample_standard_normal(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut().iter_mut().take(n) {
            *v = self.next_normal();
        }
        t
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}
