//! Seed handling. Every random stream in the crate is derived from one root
//! seed so a run is reproducible from its config alone.
//!
//! Splitting rule: `derive_seed(root, label)` takes the first eight bytes
//! (little endian) of `SHA-256(root.to_le_bytes() ‖ label)`. Per-path
//! streams use ChaCha8 seeded with the stream seed and `set_stream(path)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
