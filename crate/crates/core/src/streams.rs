//! Domain-separated random streams.
//!
//! Every source of randomness in a run (device selection, per-device
//! shuffling, per-device noise, protocol seeds, model initialisation) is
//! derived from the single 64-bit master seed by hashing it together with a
//! domain tag and a list of indices. Streams with different tags or indices
//! are independent, so changing how one of them is consumed never perturbs
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a 32-byte seed from `master`, a domain tag and indices.
pub fn derive_seed(master: u64, domain: &str, ids: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"pfl/stream/v1");
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    h.update(master.to_le_bytes());
    for id in ids {
        h.update(id.to_le_bytes());
    }
    h.finalize().into()
}

/// A ChaCha20 generator seeded by [`derive_seed`].
pub fn stream(master: u64, domain: &str, ids: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(master, domain, ids))
}

pub const SELECTION: &str = "selection";
pub const SHUFFLE: &str = "shuffle";
pub const NOISE: &str = "noise";
pub const PROTOCOL: &str = "protocol";
pub const INIT: &str = "init";
pub const PARTITION: &str = "partition";
pub const SYNTHETIC: &str = "synthetic";
pub const ESTIMATE: &str = "estimate";
