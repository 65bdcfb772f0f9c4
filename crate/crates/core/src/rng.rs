//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

fn stream_id(name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Independent generator for the component `name` (e.g. "data", "init", "batch", "eval").
pub fn substream(root: u64, name: &str) -> Rng {
    substream_indexed(root, name, 0)
}

pub fn substream_indexed(root: u64, name: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream_id(name, index));
    rng
}
