//! Seed derivation for reproducible, schedule-independent random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream keyed by
//! `(master seed, domain, a, b)`, so results do not depend on which worker
//! handles which replicate or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Distinct values keep the derived streams disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    DataQuantiles = 1,
    ReplicateSample = 2,
    OptimizerRestart = 3,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit key mixing `domain`, `a` and `b`; xored into the master seed.
pub fn stream_key(domain: Domain, a: u64, b: u64) -> u64 {
    let mut s = domain as u64;
    let h1 = splitmix64(&mut s);
    let mut s = h1 ^ a;
    let h2 = splitmix64(&mut s);
    let mut s = h2 ^ b;
    splitmix64(&mut s)
}

/// Independent generator for `(domain, a, b)` under `master_seed`.
pub fn derive_stream(master_seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    let mut state = master_seed ^ stream_key(domain, a, b);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
