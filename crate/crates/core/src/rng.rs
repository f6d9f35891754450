//! Deterministic, platform-stable pseudo-random number generation.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): the 64-bit state
//! advances by the golden-ratio constant `0x9E3779B97F4A7C15` and each output
//! is the mix
//!
//! ```text
//! z  = state
//! z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
//! z ^= z >> 27;  z *= 0x94D049BB133111EB
//! z ^= z >> 31
//! ```
//!
//! Uniform doubles take the top 53 bits (`(z >> 11) * 2^-53`) and Gaussian
//! draws use the Irwin-Hall sum of twelve uniforms minus six. Neither path
//! touches libm, so every stream is bit-identical across platforms.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seeded SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via the Irwin-Hall 12-sum. Exact mean 0, variance 1,
    /// support clipped to (-6, 6); adequate for synthetic noise and weight
    /// init, and free of platform-dependent libm calls.
    pub fn gaussian(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.uniform();
        }
        acc - 6.0
    }

    /// Uniform integer in `[0, n)`. Plain modulo; the bias is irrelevant at
    /// the scales used here and the result is platform-stable.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Derive an independent stream seed from a base seed and a tag. Feeding the
/// combined value through one SplitMix64 step decorrelates nearby tags.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    Prng::new(base ^ tag.wrapping_mul(GOLDEN)).next_u64()
}
