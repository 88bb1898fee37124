//! Seed derivation.
//!
//! Every random draw in the engine comes from a named substream of a single
//! root seed. A substream is identified by a label plus integer indices
//! (task, epoch, step, ...), hashed into a fresh 64-bit seed. Consumers that
//! get skipped (a loss term weighted to zero, say) therefore never shift the
//! draws of any other consumer.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream cipher RNG used everywhere; fixed so runs replay bit-for-bit on
/// any platform.
pub type Stream = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes `(root, label, indices)` into a new seed.
pub fn derive_seed(root: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ 0x5bf0_3635_d1a4_47c1);
    for &b in label.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &ix in indices {
        h = splitmix64(h ^ ix);
    }
    h
}

/// A ready-to-draw stream for `(root, label, indices)`.
pub fn substream(root: u64, label: &str, indices: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(root, label, indices))
}
