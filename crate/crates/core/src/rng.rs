//! Deterministic counter-based random number generation with hierarchical
//! stream splitting.
//!
//! The generator is SplitMix64: output `i` of a stream with key `k` is
//! `mix(k + (i+1)*GAMMA)` where `mix` is the SplitMix64 finalizer and
//! `GAMMA = 0x9E3779B97F4A7C15`. Because each output depends only on
//! `(key, counter)`, draws are position-addressable and the sequence is
//! portable across implementations.
//!
//! Child streams are derived from the parent's key, never from its counter:
//! `child_key = mix(parent_key XOR mix(index + GAMMA))`. Consuming draws
//! from a parent therefore never perturbs its children, and changing how
//! many draws task `t` uses cannot shift task `t+1`'s stream.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Fixed stream indices under a master seed, so every consumer of
/// [`Rng::derive_seed`] agrees on the layout.
pub mod streams {
    /// Weight initialization.
    pub const INIT: u64 = 0;
    /// Meta-training task pool.
    pub const TRAIN_TASKS: u64 = 1;
    /// Meta-test task pool.
    pub const TEST_TASKS: u64 = 2;
    /// Monte-Carlo diagnostics.
    pub const DIAGNOSTICS: u64 = 3;
    /// Online task sequence.
    pub const ONLINE: u64 = 4;
}

/// SplitMix64 finalizer: a bijective 64-bit mixer.
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// A splittable deterministic RNG stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    /// Root stream for a master seed.
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed.wrapping_add(GAMMA)),
            counter: 0,
        }
    }

    /// Derive child stream `index` from this stream's key.
    ///
    /// Independent of how many draws have been consumed from `self`.
    pub fn child(&self, index: u64) -> Self {
        Rng {
            key: mix(self.key ^ mix(index.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    /// Stable 64-bit seed for subdomain `index` of a master seed; equals the
    /// key of `Rng::new(master).child(index)`.
    pub fn derive_seed(master: u64, index: u64) -> u64 {
        Rng::new(master).child(index).key
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform on [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (two uniforms per draw, no caching).
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform sign in {-1.0, +1.0}.
    pub fn sign(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}
