//! Named, seeded random streams. Every stage of the pipeline draws from its
//! own stream so that changing one stage's consumption never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

fn derive(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Stream for a pipeline stage, e.g. `stream(seed, "world")`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    log::trace!("rng stream {name} seed {seed}");
    ChaCha8Rng::seed_from_u64(derive(&[&seed.to_le_bytes(), name.as_bytes()]))
}

/// Stream keyed additionally by an item id (entity id, probe id, ...).
pub fn substream(seed: u64, name: &str, id: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive(&[&seed.to_le_bytes(), name.as_bytes(), id.as_bytes()]))
}
