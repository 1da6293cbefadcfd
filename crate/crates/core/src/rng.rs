//! Seeded random streams.
//!
//! Every consumer of randomness derives its own stream from
//! `(global seed, purpose tag, indices)`. Streams never share state, so
//! results do not depend on thread count or evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Derives the stream for `tag` at the given index tuple.
pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    for i in indices {
        hasher.update(i.to_le_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
