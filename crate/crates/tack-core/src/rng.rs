//! Deterministic random source used everywhere randomness is needed.
//!
//! A tiny splitmix64 generator: fast, full 64-bit state, and trivially
//! reproducible across platforms. Worker streams are derived by hashing the
//! parent seed with a stream index, so parallel generation stays independent
//! of scheduling order.

/// Splitmix64 generator. `Clone` is deliberate: forking a sampler copies the
/// state, which is occasionally useful in tests; derived streams should use
/// [`Rng::derive`] instead so they don't overlap.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Next raw 64-bit value.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1). Uses the top 53 bits so every value is an exact f64.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be non-zero; modulo bias is
    /// negligible for the small ranges used here (object counts, pixels).
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller. Consumes two uniforms per call rather
    /// than caching the second value, keeping the stream position a pure
    /// function of call count.
    pub fn normal(&mut self) -> f64 {
        // Guard against ln(0): shift u1 into (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal with the given mean and standard deviation.
    pub fn normal_with(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Independent child stream for worker `index`. Mixes the index through
    /// one splitmix round so adjacent indices land far apart in state space.
    pub fn derive(&self, index: u64) -> Rng {
        let mut mixer = Rng {
            state: self
                .state
                .wrapping_mul(0x9E6C_63D0_876A_3F6B)
                .wrapping_add(index),
        };
        let seed = mixer.next_u64() ^ index.rotate_left(17);
        Rng::new(seed)
    }
}
