//! Weisfeiler-Lehman structural hashing.
//!
//! Labels start as node degrees (features are ignored) and are refined by
//! hashing each node's label together with the sorted multiset of its
//! neighbours' labels. All hashing is FNV-1a over little-endian `u64` words,
//! which is stable across platforms and releases.

use super::Graph;
use serde::{Deserialize, Serialize};
use std::fmt;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WlDigest(pub u64);

impl fmt::Display for WlDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub(crate) fn new() -> Self {
        Self(FNV_OFFSET)
    }

    pub(crate) fn word(mut self, w: u64) -> Self {
        for b in w.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub(crate) fn finish(self) -> u64 {
        self.0
    }
}

/// Hash of a word sequence, prefixed by its length.
pub(crate) fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(Fnv64::new().word(words.len() as u64), |h, &w| h.word(w)).finish()
}

/// WL digest after `rounds` refinement rounds.
pub fn wl_hash(g: &Graph, rounds: usize) -> WlDigest {
    let n = g.node_count();
    let mut labels: Vec<u64> = (0..n).map(|v| g.degree(v) as u64).collect();
    let mut scratch = Vec::new();
    for _ in 0..rounds.max(1) {
        let next: Vec<u64> = (0..n)
            .map(|v| {
                scratch.clear();
                scratch.extend(g.neighbors(v).iter().map(|&u| labels[u]));
                scratch.sort_unstable();
                let mut h = Fnv64::new().word(labels[v]).word(scratch.len() as u64);
                for &l in &scratch {
                    h = h.word(l);
                }
                h.finish()
            })
            .collect();
        labels = next;
    }
    labels.sort_unstable();
    WlDigest(hash_words(&labels))
}

/// WL digest with `rounds = n`.
pub fn wl_hash_default(g: &Graph) -> WlDigest {
    wl_hash(g, g.node_count())
}
