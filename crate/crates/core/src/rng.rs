//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 generator seeded from the master seed, with the
//! stream number derived by SplitMix64 hashing of a path of indices (cell,
//! replicate, chain, ...). The same path always yields the same stream,
//! independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One SplitMix64 output step.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds an index path into a 64-bit stream id.
pub fn derive_stream(path: &[u64]) -> u64 {
    path.iter()
        .fold(0x005E_ED0F_5EC5_u64, |acc, &i| splitmix64(acc ^ splitmix64(i)))
}

/// Generator for `(master seed, path)`.
pub fn stream_rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(derive_stream(path));
    rng
}
