//! Seed derivation.
//!
//! Every random stream in a run is derived from one root seed and a stream
//! label through a SplitMix64 counter, so sibling streams never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derive a child seed for a named stream and a counter within it.
pub fn derive(root: u64, label: &str, counter: u64) -> u64 {
    splitmix(splitmix(root ^ label_hash(label)).wrapping_add(counter.wrapping_mul(GOLDEN)))
}

/// A seeded generator for a derived stream.
pub fn rng(root: u64, label: &str, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label, counter))
}
