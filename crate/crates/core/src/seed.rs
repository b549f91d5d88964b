//! Stable seed derivation. `std`'s hashers are not guaranteed stable across
//! releases, so derived seeds use FNV-1a and the SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Mixes a base seed with a label and an index.
pub fn derive(base: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ fnv1a(label.as_bytes())).wrapping_add(index))
}

/// Uniform float in `[0, 1)` from a hash value.
pub fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub fn rng(base: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, label, index))
}

/// Per-item substream: the `stream` word of ChaCha selects an independent
/// sequence, so item `i` gets the same randomness regardless of batching.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
