//! Hierarchical seed paths.
//!
//! Every random draw in an experiment is addressed by a path such as
//! `(master, k, n) / "grid" / draw 2 / cell 7`. The path is hashed into the
//! key of a ChaCha stream, so a value depends only on its address and never
//! on the order in which workers happen to reach it.

use std::fmt;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedPath(Vec<u64>);

impl SeedPath {
    pub fn root(master: u64) -> Self {
        SeedPath(vec![master])
    }

    /// Appends a numeric component (repetition index, cell index, ...).
    pub fn child(&self, index: u64) -> Self {
        let mut parts = self.0.clone();
        parts.push(index);
        SeedPath(parts)
    }

    /// Appends a named component (draw kind).
    pub fn tag(&self, name: &str) -> Self {
        self.child(fnv1a(name.as_bytes()))
    }

    pub fn components(&self) -> &[u64] {
        &self.0
    }

    pub fn key(&self) -> [u8; 32] {
        let mut state = 0x6a09_e667_f3bc_c908u64 ^ (self.0.len() as u64);
        for &part in &self.0 {
            state = splitmix64(state ^ splitmix64(part));
        }
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        key
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key())
    }
}

impl fmt::Debug for SeedPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SeedPath{:?}", self.0)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_stream() {
        let a = SeedPath::root(7).tag("grid").child(3);
        let b = SeedPath::root(7).tag("grid").child(3);
        let xa: Vec<u64> = a.rng().random_iter().take(8).collect();
        let xb: Vec<u64> = b.rng().random_iter().take(8).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn sibling_paths_differ() {
        let base = SeedPath::root(7).tag("data");
        assert_ne!(base.child(0).key(), base.child(1).key());
        assert_ne!(base.key(), SeedPath::root(7).tag("grid").key());
        // a path is not confused with its own prefix extended by zero
        assert_ne!(SeedPath::root(0).key(), SeedPath::root(0).child(0).key());
    }
}
