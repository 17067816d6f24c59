//! Deterministic seed derivation.
//!
//! Every stochastic component (weight init, dataset rendering, episode
//! sampling) draws from a ChaCha stream keyed by a seed derived here, so
//! independent streams never alias and full runs replay bit-exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with any number of stream components.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = base;
    let mut out = splitmix64(&mut state);
    for &p in parts {
        state ^= p.wrapping_mul(0xff51_afd7_ed55_8ccd);
        out ^= splitmix64(&mut state);
    }
    out
}

/// RNG for the stream identified by `(base, parts)`.
pub fn stream_rng(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(base, parts))
}
