//! Deterministic random streams.
//!
//! Every stochastic operation in the crate draws from an [`RngStream`], which
//! is fully specified so that a (seed, stream) pair yields bit-identical
//! sequences on every platform and in every run:
//!
//! * generator: ChaCha8 keyed by a 32-byte block derived from `(seed, stream)`
//!   with a SplitMix64 chain (see [`key_block`]); the raw output is the
//!   generator's native little-endian u64 sequence
//! * uniforms: the top 53 bits of a u64 mapped to `[0, 1)` or `(0, 1]`
//! * normals: Box-Muller on one `(0, 1]` and one `[0, 1)` uniform, drawn in
//!   that order; the cosine branch is returned first and the sine branch is
//!   cached for the next call
//!
//! Streams with different ids are statistically independent; splitting mixes
//! a salt into the stream id so derived streams never collide in practice.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step: advances the state and returns the mixed output.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Expand `(seed, stream)` into the 32-byte ChaCha8 key block: four u64s,
/// alternating SplitMix64 outputs seeded by `seed` and by `stream ^ golden`.
fn key_block(seed: u64, stream: u64) -> [u8; 32] {
    let mut a = seed;
    let mut b = stream ^ 0x9E37_79B9_7F4A_7C15;
    let words = [
        splitmix64(&mut a),
        splitmix64(&mut b),
        splitmix64(&mut a),
        splitmix64(&mut b),
    ];
    let mut out = [0u8; 32];
    for (chunk, w) in out.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    out
}

/// A seeded, splittable random stream with a fixed normal transform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    chacha: ChaCha8Rng,
    /// Second Box-Muller branch kept for the next `next_normal` call.
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream {
            seed,
            stream,
            chacha: ChaCha8Rng::from_seed(key_block(seed, stream)),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derive an independent stream from this one's identity and a salt.
    /// Splitting is a pure function of `(seed, stream, salt)`: it does not
    /// consume draws and repeated calls with the same salt agree.
    pub fn split(&self, salt: u64) -> RngStream {
        let mut s = salt;
        let mixed = self.stream ^ splitmix64(&mut s);
        RngStream::new(self.seed, mixed)
    }

    /// Raw 64-bit output of the underlying generator.
    pub fn next_u64(&mut self) -> u64 {
        self.chacha.next_u64()
    }

    /// Uniform in `[0, 1)`: top 53 bits scaled by 2^-53.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`: top 53 bits plus one, scaled by 2^-53.
    /// Safe to pass to `ln`.
    pub fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` via `floor(u * n)` on a `[0, 1)` uniform,
    /// clamped to `n - 1`. The O(2^-53 * n) bias is irrelevant at the sizes
    /// used here and keeps the draw count per call fixed at one.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index needs a non-empty range");
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    /// Uniform in `[low, high)`.
    pub fn next_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Standard normal draw; see the module docs for the exact transform.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}
