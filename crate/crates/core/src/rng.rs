//! Seed derivation.
//!
//! Every random stream in a run descends from one `u64` seed. Named
//! components get `sha256(seed_le || name)` truncated to 8 bytes; parallel
//! workers and row blocks get `base + index`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

pub fn derive_seed(seed: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn component_rng(seed: u64, component: &str) -> SimRng {
    rng_from_seed(derive_seed(seed, component))
}
