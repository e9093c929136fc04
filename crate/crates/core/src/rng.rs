//! Counter-based deterministic random number generation.
//!
//! All randomness in the crate flows through [`Rng`], a splitmix64 stream.
//! Child streams are derived by hashing the parent seed with a stream index,
//! so independent parts of a pipeline (records, degradations, prompts) can
//! draw from decoupled sequences without sharing mutable state across
//! threads.

use crate::detmath;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Stateless 64-bit mix (the splitmix64 finalizer). Used both for stream
/// advancement and for seed derivation.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream index. Labels are
/// hashed in so different subsystems get unrelated streams even for equal
/// indices.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = parent ^ 0x51_7c_c1_b7_27_22_0a_95;
    for &b in label.as_bytes() {
        h = mix64(h ^ u64::from(b));
    }
    mix64(h ^ index.wrapping_mul(GOLDEN_GAMMA))
}

/// splitmix64 generator: a counter plus the mix function. Same seed gives
/// the same sequence on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Child generator for a labeled substream.
    pub fn child(&self, label: &str, index: u64) -> Rng {
        Rng::new(derive_seed(self.state, label, index))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be positive; rejection sampling
    /// keeps the distribution exact.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller (deterministic transcendentals).
    pub fn gaussian(&mut self) -> f64 {
        // u in (0,1] so the log argument never hits zero.
        let u = 1.0 - self.uniform();
        let v = self.uniform();
        (-2.0 * detmath::ln(u)).sqrt() * detmath::cos(2.0 * std::f64::consts::PI * v)
    }

    /// Fisher-Yates shuffle in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below((i + 1) as u64) as usize;
            items.swap(i, j);
        }
    }
}
