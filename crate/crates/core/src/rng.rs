//! Named random sub-streams derived from one run seed.
//!
//! Each stream is a ChaCha8 generator keyed by `sha256(seed_le || name)`, so
//! two runs that share a seed share every stream, and arms that differ only in
//! gating still consume identical data order and initial weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const FLOW_NOISE: &str = "flow-noise";
pub const EVAL: &str = "eval";

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// A sub-stream of a sub-stream, e.g. one per episode or per trial.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    stream(seed, &format!("{name}/{index}"))
}
