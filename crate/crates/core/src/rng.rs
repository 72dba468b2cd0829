//! Seed derivation and counter-based substreams.
//!
//! Every random stage in the library is keyed by `(seed, stream)` through a
//! ChaCha generator, so results are bit-identical for a given seed no matter
//! how the work is split across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep substreams of different pipeline stages disjoint even
/// when they share a user seed and an index.
pub const DOMAIN_SIMULATE: u64 = 0x53494d;
pub const DOMAIN_RESAMPLE: u64 = 0x524553;
pub const DOMAIN_SIZES: u64 = 0x53495a;

/// Independent substream `stream` of the generator keyed by `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.into());
    rng
}

/// Derive a child seed from `(seed, domain, index)` with a splitmix64-style
/// finalizer. Used to hand disjoint seeds to nested stages (e.g. the
/// resampler inside a Monte Carlo replication).
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(domain.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
