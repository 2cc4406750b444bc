//! Deterministic RNG derivation.
//!
//! Every stochastic component draws from its own stream, derived from the
//! run seed plus a purpose label and an index (window id, epoch, …). Streams
//! are therefore stable under reordering of other components: adding a draw
//! somewhere never shifts anyone else's randomness, which is what makes
//! same-seed runs byte-identical end to end.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// FNV-1a over the label bytes, fixing the label's slice of the key.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// A ChaCha20 stream keyed by `(seed, label, index)`.
pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(label.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(b"CLADSEED");
    ChaCha20Rng::from_seed(key)
}
