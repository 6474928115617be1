//! Seeded pseudo-random generation.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): 64 bits of state
//! advanced by the golden-gamma constant and passed through a finalizing mix.
//! It is fixed here rather than borrowed from a crate so that streams are
//! reproducible bit-for-bit across platforms and releases, which the golden
//! sequence tests below pin down.
//!
//! Sub-streams are derived from the stream's own seed and a label, not from
//! its current position, so a component that stops consuming randomness does
//! not perturb the draws seen by any other component.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes, used to key sub-streams.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    state: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, state: seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh stream keyed by `label`, independent of how many values this
    /// stream has produced.
    pub fn substream(&self, label: &str) -> RngState {
        RngState::new(mix64(self.seed ^ label_hash(label)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of randomness.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Normal draw via the Box-Muller transform of two uniforms. The sibling
    /// value of the pair is discarded so each call consumes exactly two
    /// uniforms. `std = 0` returns `mean` exactly without consuming draws.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        assert!(std >= 0.0, "normal: std must be non-negative");
        if std == 0.0 {
            return mean;
        }
        // 1 - uniform() lies in (0, 1], keeping the log argument positive.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        mean + std * z
    }

    /// Uniform index in `0..n` via the multiply-shift reduction
    /// (bias below n / 2^64, negligible at these scales).
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index: empty range");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.index(i + 1);
            slice.swap(i, j);
        }
    }

    /// Draw an index with the given (normalized) probabilities. Rounding
    /// shortfall falls on the final index.
    pub fn choose_weighted(&mut self, probs: &[f64]) -> usize {
        assert!(!probs.is_empty());
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}
