//! Seed derivation for reproducible runs.
//!
//! Every stochastic choice (parameter init, batch shuffling, dropout,
//! clustering, label draws) pulls its own stream derived from a master
//! seed plus a structural tag, so changing one consumer never perturbs
//! another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 step; good enough to decorrelate structured tags.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a sequence of tag words into a child seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0x6a09e667f3bcc908;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t;
        out ^= splitmix64(&mut state);
    }
    out
}

/// A deterministic RNG for the given derived seed.
pub fn rng_from(master: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, tags))
}
