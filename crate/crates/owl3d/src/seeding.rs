//! Deterministic RNG derivation.
//!
//! Per-scene streams are keyed by (master seed, scene id) through a hash,
//! so results do not depend on the order scenes are processed in or on
//! worker-thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Counter-based stream keyed by a master seed and an arbitrary label
/// (scene id, operation name, ...).
pub fn derive_rng(master_seed: u64, label: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update([0x1f]); // domain separator
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(seed)
}
