//! Counter-based random numbers for reproducible, schedule-free simulation.
//!
//! The generator is SplitMix64 used in random-access form: the `i`-th output of
//! a stream keyed by `key` is
//!
//! ```text
//! mix64(key + (i + 1) * 0x9E37_79B9_7F4A_7C15)
//! mix64(x) = let x = (x ^ (x >> 30)) * 0xBF58_476D_1CE4_E5B9;
//!            let x = (x ^ (x >> 27)) * 0x94D0_49BB_1331_11EB;
//!            x ^ (x >> 31)
//! ```
//!
//! with wrapping 64-bit arithmetic. Because any position can be computed
//! directly, a simulation can lay its stream out in fixed slots (random effects
//! first, then outcomes) so that changing cluster sizes or fitted models never
//! shifts which numbers a given draw consumes.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_A: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_B: u64 = 0x94D0_49BB_1331_11EB;

#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(MIX_A);
    x = (x ^ (x >> 27)).wrapping_mul(MIX_B);
    x ^ (x >> 31)
}

/// Derive the stream key for one replication of a scenario.
///
/// Depends on `(base_seed, replication)` only.
pub fn replication_key(base_seed: u64, replication: u64) -> u64 {
    mix64(
        mix64(base_seed ^ 0x6A09_E667_F3BC_C908)
            .wrapping_add(replication.wrapping_mul(GOLDEN_GAMMA)),
    )
}

/// SplitMix64 stream with an explicit, seekable counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

#[inline]
fn to_open_unit(v: u64) -> f64 {
    ((v >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        CounterRng { key, counter: 0 }
    }

    pub fn from_seed(base_seed: u64, replication: u64) -> Self {
        Self::new(replication_key(base_seed, replication))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Move the stream to an absolute position.
    pub fn seek(&mut self, counter: u64) {
        self.counter = counter;
    }

    /// Output at an absolute position without touching the cursor.
    #[inline]
    pub fn at(&self, counter: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform on the open interval (0, 1) with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        to_open_unit(self.next_u64())
    }

    /// [`Self::uniform`] at an absolute position, cursor untouched.
    #[inline]
    pub fn uniform_at(&self, counter: u64) -> f64 {
        to_open_unit(self.at(counter))
    }

    /// Standard normal via Box–Muller. Always consumes exactly two outputs.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unit-rate exponential. Consumes one output.
    pub fn exponential(&mut self) -> f64 {
        -self.uniform().ln()
    }
}
