//! Deterministic, allocation-free PRNG plumbing. Everything downstream
//! (masks, DARE, synthetic benchmarks) draws from SplitMix64 streams whose
//! seeds derive from stored artifact state, so compress and decompress agree
//! bit-for-bit on any platform.

use half::f16;

pub const SPLITMIX_GAMMA: u64 = 0x9E3779B97F4A7C15;

/// SplitMix64. The output stream for seed 0 starts
/// 0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F (reference vectors).
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(SPLITMIX_GAMMA);
        finalize(self.state)
    }

    /// Uniform f64 in [0, 1) using the top 53 bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln finite
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[inline]
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// One SplitMix64 step applied to an arbitrary 64-bit value (add the
/// increment, then finalize), used to turn hashes into well-mixed seeds.
#[inline]
pub fn mix(x: u64) -> u64 {
    finalize(x.wrapping_add(SPLITMIX_GAMMA))
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    U,
    V,
}

/// Seed for the mask stream of one singular-vector column. Derives from the
/// artifact-stored 16-bit σ (widened to f64) and the tensor-name salt; the V
/// factor adds 1 before mixing so the two sides of a pair are independent.
pub fn mask_seed(sigma_stored: f16, salt: &str, which: Factor) -> u64 {
    let widened: f64 = f64::from(sigma_stored.to_f32());
    let mut x = widened.to_bits() ^ fnv1a64(salt.as_bytes());
    if which == Factor::V {
        x = x.wrapping_add(1);
    }
    mix(x)
}

/// Seed for a DARE drop stream: the salt concatenated with a NUL and the
/// literal "dare", hashed and mixed.
pub fn dare_seed(salt: &str) -> u64 {
    let mut bytes = Vec::with_capacity(salt.len() + 5);
    bytes.extend_from_slice(salt.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(b"dare");
    mix(fnv1a64(&bytes))
}

/// Keep-threshold comparison for masks: entry survives iff its 64-bit draw is
/// below (1-p)·2^64. p == 0 keeps everything (the saturated threshold would
/// lose the single draw equal to u64::MAX).
#[inline]
pub fn keep_draw(draw: u64, p: f64) -> bool {
    if p <= 0.0 {
        return true;
    }
    let threshold = ((1.0 - p) * 18446744073709551616.0) as u64; // saturating cast
    draw < threshold
}
